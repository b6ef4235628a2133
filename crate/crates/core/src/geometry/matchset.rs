use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// One correspondence in full-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Match {
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
    pub conf: f64,
    /// Resolution of the stage that emitted it: 0.125, 0.25 or 0.5.
    pub scale: f64,
}

impl Match {
    pub fn a(&self) -> [f64; 2] {
        [self.xa, self.ya]
    }

    pub fn b(&self) -> [f64; 2] {
        [self.xb, self.yb]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub entries: Vec<Match>,
}

impl MatchSet {
    pub fn new(entries: Vec<Match>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn points_a(&self) -> Vec<[f64; 2]> {
        self.entries.iter().map(Match::a).collect()
    }

    pub fn points_b(&self) -> Vec<[f64; 2]> {
        self.entries.iter().map(Match::b).collect()
    }

    /// Checks bounds, confidence range and source-point uniqueness.
    pub fn validate(&self, size_a: (f64, f64), size_b: (f64, f64)) -> Result<()> {
        let mut seen = HashSet::new();
        for m in &self.entries {
            let inside = |x: f64, y: f64, s: (f64, f64)| x >= 0.0 && y >= 0.0 && x <= s.0 && y <= s.1;
            if !inside(m.xa, m.ya, size_a) || !inside(m.xb, m.yb, size_b) {
                return Err(invalid!("match {:?} outside image bounds", m));
            }
            if !(0.0..=1.0).contains(&m.conf) {
                return Err(invalid!("confidence {} outside [0, 1]", m.conf));
            }
            if !seen.insert((m.xa.to_bits(), m.ya.to_bits())) {
                return Err(invalid!("duplicate source point ({}, {})", m.xa, m.ya));
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for m in &self.entries {
            serde_json::to_writer(&mut w, m)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
