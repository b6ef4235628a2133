use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::DataConfig;
use super::eval::EvalConfig;
use crate::attention::AttentionConfig;
use crate::detect::Detector;
use crate::error::{invalid, Result};
use crate::matcher::ModelConfig;
use crate::training::TrainConfig;

/// One JSON document describing a run. Unknown keys are rejected at every level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub attention: AttentionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub detector: Detector,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Checkpoint written by `train` and read by the other subcommands.
    pub checkpoint: Option<String>,
    /// Metrics JSON-lines log.
    pub metrics: Option<String>,
    /// Report / plot directory.
    pub dir: Option<String>,
    /// Evaluate on `data.eval_dir` every this many training steps (0 disables).
    pub eval_every: usize,
    pub plots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { checkpoint: None, metrics: None, dir: None, eval_every: 0, plots: false }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid!("run config: {e}"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid!("cannot read {}: {e}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate(&self.attention)?;
        self.train.validate()?;
        self.eval.validate()?;
        self.detector.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            r#"{"sed": 1}"#,
            r#"{"attention": {"self_variant": "lsa", "lsa": {"windw": 3}}}"#,
            r#"{"detector": {"kind": "nms", "kernel": 5, "x": 1}}"#,
            r#"{"eval": {"auc": [1]}}"#,
        ] {
            assert!(RunConfig::from_json(bad).unwrap_err().is_validation(), "{bad}");
        }
        let ok = RunConfig::from_json(r#"{"attention": {"self_variant": "gsa", "gsa": {"rate": 2}}, "detector": {"kind": "grid", "cell": 4}}"#).unwrap();
        assert_eq!(ok.attention.gsa.rate, 2);
        assert_eq!(ok.detector, Detector::Grid { cell: 4 });
    }
}
