use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detect::Detector;
use crate::error::{invalid, Result};
use crate::geometry::synth::ProceduralTexture;
use crate::geometry::{synth::homography_pair, HomographyBounds};
use crate::matcher::Model;
use crate::nn::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchRow {
    pub stage: String,
    pub median_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub size: usize,
    pub scales: Vec<usize>,
    pub runs: usize,
    pub detector: String,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn get(&self, stage: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.stage == stage).map(|r| r.median_ms)
    }

    /// Sum of every row except the total.
    pub fn parts(&self) -> f64 {
        self.rows.iter().filter(|r| r.stage != "total").map(|r| r.median_ms).sum()
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let scales = self.scales.iter().map(|v| format!("1/{v}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "timing at {0}x{0}, scales {scales}, median of {1} runs:", self.size, self.runs);
        for r in &self.rows {
            let _ = writeln!(s, "{:<24} {:>10.2} ms", r.stage, r.median_ms);
        }
        s
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-stage wall clock of the full pipeline plus detection on a synthetic
/// pair, after one warm-up run.
pub fn bench(
    model: &Model,
    store: &ParamStore<f32>,
    size: usize,
    scales: Option<&[usize]>,
    detector: Detector,
    runs: usize,
    seed: u64,
) -> Result<BenchReport> {
    if runs < 5 {
        return Err(invalid!("bench needs at least 5 timed runs, got {runs}"));
    }
    if size < 16 {
        return Err(invalid!("bench size must be at least 16"));
    }
    detector.validate()?;
    let scales = scales.map(<[usize]>::to_vec).unwrap_or_else(|| model.cfg.matcher.scales.clone());
    let pair = homography_pair(seed, size, size, &HomographyBounds::default(), &ProceduralTexture::new(seed, size, size))?;
    let mut names: Vec<String> = Vec::new();
    let mut samples: Vec<Vec<f64>> = Vec::new();
    for run in 0..=runs {
        let out = model.run(store, &pair.image_a, &pair.image_b, Some(&scales))?;
        let clock = Instant::now();
        detector.apply(&out.confidence, &out.matches)?;
        let det_ms = clock.elapsed().as_secs_f64() * 1e3;
        if run == 0 {
            continue;
        }
        let mut row: Vec<(String, f64)> = Vec::new();
        let mut total = 0.0;
        for t in &out.timings {
            if t.name == "total" {
                total = t.ms;
            } else {
                row.push((t.name.clone(), t.ms));
            }
        }
        row.push(("detection".into(), det_ms));
        row.push(("total".into(), total + det_ms));
        if names.is_empty() {
            names = row.iter().map(|r| r.0.clone()).collect();
            samples = vec![Vec::new(); names.len()];
        }
        for (name, ms) in row {
            let k = names.iter().position(|n| *n == name).ok_or_else(|| crate::Error::Runtime(format!("stage {name} appeared mid-benchmark")))?;
            samples[k].push(ms);
        }
    }
    let rows = names.into_iter().zip(samples).map(|(stage, mut v)| BenchRow { stage, median_ms: median(&mut v) }).collect();
    Ok(BenchReport { size, scales, runs, detector: detector.label(), rows })
}
