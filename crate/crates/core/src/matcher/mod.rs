//! Coarse matching, cascade stages, and the end-to-end model.

mod cascade;
mod coarse;
mod model;

use serde::{Deserialize, Serialize};

pub use cascade::{
    argmax_valid, cycle_filter, local_probabilities, reverse_candidates, spawn_children, Children, StageResult,
};
pub use coarse::{dual_softmax, mutual_matches, CoarseResult};
pub use model::{
    FeatureSource, MatchingOut, Model, ModelConfig, PairFeatures, PipelineOut, SpawnPolicy, StageOut, StageTiming,
};

use crate::error::{invalid, Result};

/// Block type inside a cascade stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    #[serde(rename = "self")]
    SelfAttn,
    Cross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePattern {
    pub stride: usize,
    pub blocks: Vec<BlockKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherConfig {
    /// Strides, coarse first, each half the previous: `[8]`, `[8, 4]`, `[8, 4, 2]`.
    pub scales: Vec<usize>,
    /// Interleaved self/cross blocks at the coarse stride (even).
    pub coarse_blocks: usize,
    /// Block order per cascade stride; strides not listed use the first entry.
    pub patterns: Vec<StagePattern>,
    pub temperature: f64,
    /// Per-stage confidence gate.
    pub threshold: f64,
    pub refine: bool,
    /// Image size `[w, h]` seen in training; other sizes use normalized
    /// position encodings.
    pub train_size: Option<[usize; 2]>,
    /// Parents spawning children per stage during training.
    pub train_parents: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        use BlockKind::*;
        Self {
            scales: vec![8, 4, 2],
            coarse_blocks: 6,
            patterns: vec![
                StagePattern { stride: 4, blocks: vec![SelfAttn, Cross, SelfAttn, Cross] },
                StagePattern { stride: 2, blocks: vec![Cross, SelfAttn, Cross] },
            ],
            temperature: 0.1,
            threshold: 0.2,
            refine: true,
            train_size: None,
            train_parents: 256,
        }
    }
}

impl MatcherConfig {
    pub fn pattern(&self, stride: usize) -> &[BlockKind] {
        self.patterns
            .iter()
            .find(|p| p.stride == stride)
            .or(self.patterns.first())
            .map(|p| p.blocks.as_slice())
            .unwrap_or(&[])
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(invalid!("matcher.scales must not be empty"));
        }
        for w in self.scales.windows(2) {
            if w[1] * 2 != w[0] {
                return Err(invalid!("matcher.scales must halve at every step, got {:?}", self.scales));
            }
        }
        if *self.scales.last().unwrap() < 2 || !self.scales[0].is_power_of_two() {
            return Err(invalid!("matcher.scales must be powers of two no finer than 2"));
        }
        if self.coarse_blocks % 2 != 0 {
            return Err(invalid!("matcher.coarse_blocks must be even (self/cross pairs)"));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid!("matcher.temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(invalid!("matcher.threshold must lie in [0, 1)"));
        }
        if self.scales.len() > 1 && self.patterns.is_empty() {
            return Err(invalid!("matcher.patterns is empty but cascade stages are configured"));
        }
        if self.patterns.iter().any(|p| p.blocks.is_empty()) {
            return Err(invalid!("matcher.patterns entries need at least one block"));
        }
        if self.train_parents == 0 {
            return Err(invalid!("matcher.train_parents must be positive"));
        }
        Ok(())
    }
}
