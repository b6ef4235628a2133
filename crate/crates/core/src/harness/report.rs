use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Homography,
    Pose,
}

impl Task {
    pub fn label(self) -> &'static str {
        match self {
            Task::Homography => "homography",
            Task::Pose => "pose",
        }
    }

    fn unit(self) -> &'static str {
        match self {
            Task::Homography => "px",
            Task::Pose => "deg",
        }
    }
}

/// One (resolution, detector) configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRow {
    pub detector: String,
    /// Square evaluation size, `None` for native.
    pub size: Option<usize>,
    pub scales: Vec<usize>,
    pub thresholds: Vec<f64>,
    /// AUC in [0, 1], one per threshold.
    pub auc: Vec<f64>,
    pub pairs: usize,
    pub failures: usize,
    pub mean_matches: f64,
    pub mean_raw_matches: f64,
    /// Per-pair error; `None` marks an estimation failure (scored as +inf).
    pub errors: Vec<Option<f64>>,
    pub timings_ms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub task: Task,
    pub source: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Fixed-width text table, AUC in percent.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} evaluation ({}):", self.task.label(), self.source);
        let Some(first) = self.rows.first() else {
            return s;
        };
        let _ = write!(s, "{:<10} {:>6} {:<8}", "detector", "size", "scales");
        for t in &first.thresholds {
            let _ = write!(s, " {:>9}", format!("AUC@{t}{}", self.task.unit()));
        }
        let _ = writeln!(s, " {:>9} {:>9} {:>6}", "matches", "raw", "fail");
        for r in &self.rows {
            let size = r.size.map_or("native".to_string(), |v| v.to_string());
            let scales = r.scales.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
            let _ = write!(s, "{:<10} {:>6} {:<8}", r.detector, size, scales);
            for a in &r.auc {
                let _ = write!(s, " {:>9.2}", 100.0 * a);
            }
            let _ = writeln!(s, " {:>9.1} {:>9.1} {:>3}/{:<2}", r.mean_matches, r.mean_raw_matches, r.failures, r.pairs);
        }
        s
    }

    /// One JSON object per row, for the metrics log.
    pub fn jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.rows {
            let v = serde_json::json!({
                "task": self.task,
                "source": self.source,
                "detector": r.detector,
                "size": r.size,
                "scales": r.scales,
                "thresholds": r.thresholds,
                "auc": r.auc,
                "failures": r.failures,
                "pairs": r.pairs,
                "mean_matches": r.mean_matches,
            });
            s.push_str(&serde_json::to_string(&v)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn row(&self, detector: &str, size: Option<usize>) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.detector == detector && r.size == size)
    }
}
