//! Self- and cross-attention variants sharing one block interface, candidate
//! construction for the cascade cross-attention, and positional encoding.

mod block;
mod candidates;
mod mixers;
mod posenc;

use serde::{Deserialize, Serialize};

pub use block::{topk_self_candidates, AttnBlock, CrossRoute, Mixer};
pub use candidates::{
    build_candidates_lw, build_candidates_mt, overlap_candidates, top_k_indices, window_candidates, CandidateSet,
    GridDims,
};
pub use mixers::{global_attention, linear_attention};
pub use posenc::{sinusoid, PeMode};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelfVariant {
    Linear,
    Lsa,
    Gsa,
    Topk,
    Lka,
    Pola,
    /// Full softmax attention; reference and coarse-stage option.
    Global,
}

impl SelfVariant {
    pub const ALL_EFFICIENT: [SelfVariant; 6] = [
        SelfVariant::Linear,
        SelfVariant::Lsa,
        SelfVariant::Gsa,
        SelfVariant::Topk,
        SelfVariant::Lka,
        SelfVariant::Pola,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossVariant {
    Lw,
    Mt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LsaParams {
    pub window: usize,
}

impl Default for LsaParams {
    fn default() -> Self {
        Self { window: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GsaParams {
    pub rate: usize,
}

impl Default for GsaParams {
    fn default() -> Self {
        Self { rate: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopkParams {
    pub k: usize,
}

impl Default for TopkParams {
    fn default() -> Self {
        Self { k: 64 }
    }
}

/// Large-kernel attention built from a `(2d−1)²` depthwise conv followed by a
/// `⌈K/d⌉²` depthwise conv with dilation `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LkaParams {
    pub kernel: usize,
    pub dilation: usize,
}

impl Default for LkaParams {
    fn default() -> Self {
        Self { kernel: 21, dilation: 3 }
    }
}

impl LkaParams {
    pub fn local_kernel(&self) -> usize {
        2 * self.dilation - 1
    }

    pub fn dilated_kernel(&self) -> usize {
        let k = self.kernel.div_ceil(self.dilation);
        if k % 2 == 0 {
            k + 1
        } else {
            k
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolaParams {
    pub query_window: usize,
    pub kv_window: usize,
}

impl Default for PolaParams {
    fn default() -> Self {
        Self { query_window: 7, kv_window: 21 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LwParams {
    pub window: usize,
    pub k: usize,
}

impl Default for LwParams {
    fn default() -> Self {
        Self { window: 10, k: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtParams {
    pub parents: usize,
    pub k: usize,
}

impl Default for MtParams {
    fn default() -> Self {
        Self { parents: 32, k: 128 }
    }
}

/// Attention settings of the whole model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    /// Self-attention inside cascade stages.
    pub self_variant: SelfVariant,
    pub cross_variant: CrossVariant,
    /// Self and cross attention of the coarse stage: `linear` or `global`.
    pub coarse_variant: SelfVariant,
    pub heads: usize,
    pub ffn_mult: usize,
    pub lsa: LsaParams,
    pub gsa: GsaParams,
    pub topk: TopkParams,
    pub lka: LkaParams,
    pub pola: PolaParams,
    pub lw: LwParams,
    pub mt: MtParams,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            self_variant: SelfVariant::Lsa,
            cross_variant: CrossVariant::Lw,
            coarse_variant: SelfVariant::Linear,
            heads: 4,
            ffn_mult: 2,
            lsa: LsaParams::default(),
            gsa: GsaParams::default(),
            topk: TopkParams::default(),
            lka: LkaParams::default(),
            pola: PolaParams::default(),
            lw: LwParams::default(),
            mt: MtParams::default(),
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self, channels: &[usize]) -> Result<()> {
        if self.heads == 0 {
            return Err(invalid!("attention.heads must be positive"));
        }
        for &c in channels {
            if c % self.heads != 0 || c % 4 != 0 {
                return Err(invalid!("channel count {c} must be divisible by heads ({}) and 4", self.heads));
            }
        }
        if !matches!(self.coarse_variant, SelfVariant::Linear | SelfVariant::Global) {
            return Err(invalid!("attention.coarse_variant must be linear or global"));
        }
        if self.lw.window * self.lw.window != self.lw.k {
            return Err(invalid!("attention.lw: window² = {} but k = {}", self.lw.window.pow(2), self.lw.k));
        }
        if 4 * self.mt.parents != self.mt.k {
            return Err(invalid!("attention.mt: 4·parents = {} but k = {}", 4 * self.mt.parents, self.mt.k));
        }
        if self.lsa.window == 0 || self.gsa.rate == 0 || self.topk.k == 0 || self.ffn_mult == 0 {
            return Err(invalid!("attention window, rate, top-k and ffn_mult must be positive"));
        }
        if self.lka.dilation == 0 || self.lka.kernel < self.lka.dilation {
            return Err(invalid!("attention.lka: kernel must be at least the dilation"));
        }
        let p = &self.pola;
        if p.kv_window < p.query_window || (p.kv_window - p.query_window) % 2 != 0 || p.query_window == 0 {
            return Err(invalid!("attention.pola: kv_window must exceed query_window by an even amount"));
        }
        Ok(())
    }
}
