//! Losses, supervision, the optimizer and the progressive training loop.

mod losses;
mod optim;
mod supervision;
mod trainer;

pub use losses::{classification_loss, coarse_loss, focal_loss, refine_loss, LossKind, PROB_FLOOR};
pub use optim::{Adam, AdamConfig};
pub use supervision::{build_supervision, coarse_supervision, half_centre, refine_targets, SupervisionSet};
pub use trainer::{moving_average, ScaleLoss, StepRecord, TrainSample, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Training phase; each fixes the active scales and the trainable subset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    CoarseOnly,
    #[serde(rename = "cascade_4c")]
    Cascade4c,
    #[serde(rename = "cascade_2c")]
    Cascade2c,
    /// Ladder finetuning of the cascade over a frozen encoder and coarse stage.
    Pmt,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::CoarseOnly => "coarse_only",
            Stage::Cascade4c => "cascade_4c",
            Stage::Cascade2c => "cascade_2c",
            Stage::Pmt => "pmt",
        }
    }

    /// Number of model scales in use.
    pub fn levels(self) -> usize {
        match self {
            Stage::CoarseOnly => 1,
            Stage::Cascade4c => 2,
            Stage::Cascade2c | Stage::Pmt => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: Stage,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub coarse: f64,
    pub cascade: f64,
    pub refine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { coarse: 1.0, cascade: 1.0, refine: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Phases run in order; the progressive default keeps step ratios 1 : 2 : 1.
    pub schedule: Vec<StagePlan>,
    pub optimizer: AdamConfig,
    pub loss: LossKind,
    pub gamma: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Checkpoint the run starts from; required for `pmt`.
    pub init: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Self::progressive(100),
            optimizer: AdamConfig::default(),
            loss: LossKind::Focal,
            gamma: 2.0,
            weights: LossWeights::default(),
            seed: 0,
            init: None,
        }
    }
}

impl TrainConfig {
    /// Coarse `n`, 1/4 cascade `2n`, 1/2 cascade `n` steps.
    pub fn progressive(n: usize) -> Vec<StagePlan> {
        vec![
            StagePlan { stage: Stage::CoarseOnly, steps: n },
            StagePlan { stage: Stage::Cascade4c, steps: 2 * n },
            StagePlan { stage: Stage::Cascade2c, steps: n },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(invalid!("train.schedule must list at least one stage"));
        }
        for w in self.schedule.windows(2) {
            if w[1].stage < w[0].stage {
                return Err(invalid!("train.schedule stages must run coarse first"));
            }
        }
        if self.schedule.iter().any(|p| p.stage == Stage::Pmt) && self.init.is_none() {
            return Err(invalid!("pmt training needs an initial checkpoint (train.init)"));
        }
        if self.gamma != 2.0 {
            return Err(invalid!("focal gamma is fixed at 2"));
        }
        let w = &self.weights;
        if [w.coarse, w.cascade, w.refine].iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(invalid!("loss weights must be finite and non-negative"));
        }
        self.optimizer.validate()
    }
}
