//! Convolutional feature pyramid and the ladder side network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttnBlock, GridDims, SelfVariant};
use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::nn::{Conv, Ctx, ParamStore, ResBlock};
use crate::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Channels at strides 2, 4, 8 (and 16 when four entries are given).
    pub channels: Vec<usize>,
    /// Residual blocks after the downsampling block of each level.
    pub blocks: usize,
    /// Linear self-attention block on the stride-8 map before fusion.
    pub attention_at_8: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { channels: vec![32, 64, 96], blocks: 1, attention_at_8: false }
    }
}

impl EncoderConfig {
    pub fn strides(&self) -> Vec<usize> {
        (0..self.channels.len()).map(|i| 2 << i).collect()
    }

    pub fn channels_at(&self, stride: usize) -> Option<usize> {
        self.strides().iter().position(|&s| s == stride).map(|i| self.channels[i])
    }

    pub fn validate(&self) -> Result<()> {
        if !(3..=4).contains(&self.channels.len()) {
            return Err(invalid!("encoder.channels needs 3 or 4 entries (strides 2..8 or 2..16)"));
        }
        if self.channels.iter().any(|&c| c == 0 || c % 4 != 0) {
            return Err(invalid!("encoder channels must be positive multiples of 4"));
        }
        Ok(())
    }
}

/// Per-stride feature maps `[H/s, W/s, C_s]`, finest first.
#[derive(Clone)]
pub struct FeaturePyramid<'t, T: Scalar> {
    pub maps: Vec<(usize, Var<'t, T>)>,
}

impl<'t, T: Scalar> FeaturePyramid<'t, T> {
    pub fn get(&self, stride: usize) -> Option<Var<'t, T>> {
        self.maps.iter().find(|m| m.0 == stride).map(|m| m.1)
    }

    pub fn require(&self, stride: usize) -> Result<Var<'t, T>> {
        self.get(stride).ok_or_else(|| invalid!("feature pyramid has no stride-{stride} map"))
    }

    pub fn dims(&self, stride: usize) -> Result<GridDims> {
        let s = self.require(stride)?.shape();
        Ok(GridDims::new(s[0], s[1]))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    stem: Conv,
    levels: Vec<Vec<ResBlock>>,
    lateral: Vec<Conv>,
    reduce: Vec<Conv>,
    smooth: Vec<Conv>,
    attn: Option<AttnBlock>,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        attn_cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.channels;
        let n = ch.len();
        let stem = Conv::new(store, "encoder.stem", 3, 2, 1, ch[0], rng);
        let mut levels = Vec::with_capacity(n);
        for l in 0..n {
            let mut blocks = Vec::new();
            if l > 0 {
                blocks.push(ResBlock::new(store, &format!("encoder.l{l}.down"), ch[l - 1], ch[l], 2, rng));
            }
            for b in 0..cfg.blocks {
                blocks.push(ResBlock::new(store, &format!("encoder.l{l}.b{b}"), ch[l], ch[l], 1, rng));
            }
            levels.push(blocks);
        }
        let lateral = (0..n).map(|l| Conv::new(store, &format!("encoder.fpn.lateral{l}"), 1, 1, ch[l], ch[l], rng)).collect();
        let reduce = (0..n - 1)
            .map(|l| Conv::new(store, &format!("encoder.fpn.reduce{l}"), 1, 1, ch[l + 1], ch[l], rng))
            .collect();
        let smooth = (0..n - 1).map(|l| Conv::new(store, &format!("encoder.fpn.smooth{l}"), 3, 1, ch[l], ch[l], rng)).collect();
        let attn = cfg
            .attention_at_8
            .then(|| AttnBlock::new_self(store, "encoder.attn8", ch[2], SelfVariant::Linear, attn_cfg, rng));
        Ok(Self { cfg: cfg.clone(), stem, levels, lateral, reduce, smooth, attn })
    }

    /// `image`: `[H, W, 1]` with `H` and `W` divisible by the coarsest stride.
    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, image: Var<'t, T>) -> Result<FeaturePyramid<'t, T>> {
        let s = image.shape();
        let coarsest = *self.cfg.strides().last().unwrap();
        if s.len() != 3 || s[2] != 1 {
            return Err(invalid!("encoder expects a [H, W, 1] image, got {:?}", s));
        }
        if s[0] % coarsest != 0 || s[1] % coarsest != 0 || s[0] == 0 || s[1] == 0 {
            return Err(invalid!("image {}x{} is not divisible by {coarsest}", s[1], s[0]));
        }
        let mut x = self.stem.forward(ctx, image).relu();
        let mut trunk = Vec::with_capacity(self.levels.len());
        for (l, blocks) in self.levels.iter().enumerate() {
            for b in blocks {
                x = b.forward(ctx, x);
            }
            if l == 2 {
                if let Some(a) = &self.attn {
                    let sh = x.shape();
                    let dims = GridDims::new(sh[0], sh[1]);
                    x = a.forward_self(ctx, x.reshape(&[dims.len(), sh[2]]), dims, None)?.reshape(&sh);
                }
            }
            trunk.push(x);
        }
        let n = trunk.len();
        let mut outs = vec![self.lateral[n - 1].forward(ctx, trunk[n - 1])];
        for l in (0..n - 1).rev() {
            let top = self.reduce[l].forward(ctx, *outs.last().unwrap()).upsample2x();
            let fused = self.lateral[l].forward(ctx, trunk[l]).add(top);
            outs.push(self.smooth[l].forward(ctx, fused));
        }
        outs.reverse();
        let maps = self.cfg.strides().into_iter().zip(outs).collect();
        Ok(FeaturePyramid { maps })
    }

    /// Zeroes the coarsest output layer (used by shape and sanity checks).
    pub fn zero_coarsest<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let last = self.lateral.last().unwrap();
        for id in [last.w, last.b] {
            let shape = store.get(id).value().shape().to_vec();
            store.set(id, Tensor::zeros(&shape));
        }
    }
}

/// Trainable side network over a frozen pyramid. Every level concatenates the
/// frozen map with its own upsampled top-down state and emits
/// `frozen + proj(state)`; the projections start at zero.
#[derive(Clone, Debug)]
pub struct Ladder {
    /// Strides produced, coarse to fine.
    pub strides: Vec<usize>,
    entry: Conv,
    fuse: Vec<Conv>,
    proj: Vec<Conv>,
}

impl Ladder {
    /// Builds the ladder under the given coarse stride.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        coarse_stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let coarse_c = cfg.channels_at(coarse_stride).ok_or_else(|| invalid!("no encoder level at stride {coarse_stride}"))?;
        let mut strides = Vec::new();
        let mut s = coarse_stride / 2;
        while s >= 2 {
            strides.push(s);
            s /= 2;
        }
        let width = |c: usize| (c / 2).max(4);
        let first = strides.first().map(|&s| cfg.channels_at(s).unwrap()).unwrap_or(coarse_c);
        let entry = Conv::new(store, "ladder.entry", 1, 1, coarse_c, width(first), rng);
        let mut fuse = Vec::new();
        let mut proj = Vec::new();
        let mut prev = width(first);
        for &s in &strides {
            let c = cfg.channels_at(s).unwrap();
            fuse.push(Conv::new(store, &format!("ladder.s{s}.fuse"), 3, 1, c + prev, width(c), rng));
            let p = Conv::new(store, &format!("ladder.s{s}.proj"), 1, 1, width(c), c, rng);
            let shape = store.get(p.w).value().shape().to_vec();
            store.set(p.w, Tensor::zeros(&shape));
            proj.push(p);
            prev = width(c);
        }
        Ok(Self { strides, entry, fuse, proj })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        frozen: &FeaturePyramid<'t, T>,
        coarse_stride: usize,
    ) -> Result<FeaturePyramid<'t, T>> {
        let as_const = |v: Var<'t, T>| ctx.constant((*v.value()).clone());
        let mut state = self.entry.forward(ctx, as_const(frozen.require(coarse_stride)?)).relu();
        let mut maps = Vec::new();
        for (i, &s) in self.strides.iter().enumerate() {
            let f = as_const(frozen.require(s)?);
            let up = state.upsample2x();
            if up.shape()[..2] != f.shape()[..2] {
                return Err(invalid!("ladder level {s} does not match the frozen map"));
            }
            state = self.fuse[i].forward(ctx, Var::concat_cols(&[f, up])).relu();
            maps.push((s, f.add(self.proj[i].forward(ctx, state))));
        }
        maps.reverse();
        Ok(FeaturePyramid { maps })
    }
}
