use std::sync::Arc;

use rand::Rng;

use super::candidates::{overlap_candidates, top_k_indices, window_candidates, CandidateSet, GridDims};
use super::mixers::{global_attention, linear_attention};
use super::{AttentionConfig, SelfVariant};
use crate::autograd::{SlotBias, Var};
use crate::error::{invalid, Result};
use crate::nn::{Ctx, DepthwiseConv, Ffn, LayerNorm, Linear, ParamId, ParamStore};
use crate::{Scalar, Tensor};

/// Token-mixing rule of one attention block.
#[derive(Clone, Debug)]
pub enum Mixer {
    Global,
    Linear,
    Lsa { window: usize },
    Gsa { rate: usize },
    Topk,
    Lka { local: DepthwiseConv, dilated: DepthwiseConv },
    Pola { query_window: usize, kv_window: usize, table: ParamId },
    /// Cross-attention restricted to per-query candidate sets.
    Candidates,
}

/// How a cross block reaches the other view.
pub enum CrossRoute<'a> {
    /// Every token attends to every source token (global or linear mixer).
    Dense,
    /// Only `rows` of the input are updated; row `m` attends to `cand` slot list `m`.
    Sparse {
        rows: &'a Arc<Vec<usize>>,
        cand: &'a Arc<CandidateSet>,
    },
}

/// Pre-norm attention block: `x + O·mix(LN(x))`, then `+ FFN(LN(·))`.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub mixer: Mixer,
    pub heads: usize,
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm2: LayerNorm,
    ffn: Ffn,
}

impl AttnBlock {
    fn build<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        mixer: Mixer,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            heads: cfg.heads,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
            q: Linear::new(store, &format!("{name}.q"), c, c, false, rng),
            k: Linear::new(store, &format!("{name}.k"), c, c, false, rng),
            v: Linear::new(store, &format!("{name}.v"), c, c, false, rng),
            o: Linear::new(store, &format!("{name}.o"), c, c, false, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c),
            ffn: Ffn::new(store, &format!("{name}.ffn"), c, c * cfg.ffn_mult, rng),
            mixer,
        }
    }

    pub fn new_self<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        variant: SelfVariant,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let mixer = match variant {
            SelfVariant::Global => Mixer::Global,
            SelfVariant::Linear => Mixer::Linear,
            SelfVariant::Lsa => Mixer::Lsa { window: cfg.lsa.window },
            SelfVariant::Gsa => Mixer::Gsa { rate: cfg.gsa.rate },
            SelfVariant::Topk => Mixer::Topk,
            SelfVariant::Lka => Mixer::Lka {
                local: DepthwiseConv::new(store, &format!("{name}.lka.local"), cfg.lka.local_kernel(), 1, c, rng),
                dilated: DepthwiseConv::new(
                    store,
                    &format!("{name}.lka.dilated"),
                    cfg.lka.dilated_kernel(),
                    cfg.lka.dilation,
                    c,
                    rng,
                ),
            },
            SelfVariant::Pola => {
                let (q, kv) = (cfg.pola.query_window, cfg.pola.kv_window);
                let side = 2 * (q - 1 + (kv - q) / 2) + 1;
                let table = store.add(format!("{name}.pola.bias"), Tensor::zeros(&[side * side, cfg.heads]));
                Mixer::Pola { query_window: q, kv_window: kv, table }
            }
        };
        Self::build(store, name, c, mixer, cfg, rng)
    }

    /// Cross block: `dense` selects a global/linear mixer over all source
    /// tokens, otherwise candidate-restricted attention.
    pub fn new_cross<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        dense: Option<SelfVariant>,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let mixer = match dense {
            Some(SelfVariant::Linear) => Mixer::Linear,
            Some(_) => Mixer::Global,
            None => Mixer::Candidates,
        };
        Self::build(store, name, c, mixer, cfg, rng)
    }

    /// Same parameters under another mixer (used by equivalence checks).
    pub fn with_mixer(&self, mixer: Mixer) -> Self {
        Self { mixer, ..self.clone() }
    }

    fn finish<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>, msg: Var<'t, T>) -> Var<'t, T> {
        let x1 = x.add(self.o.forward(ctx, msg));
        x1.add(self.ffn.forward(ctx, self.norm2.forward(ctx, x1)))
    }

    /// Self-attention block over a `[h·w, C]` token grid. `topk` supplies the
    /// per-token key sets of the top-k variant.
    pub fn forward_self<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        x: Var<'t, T>,
        dims: GridDims,
        topk: Option<&Arc<CandidateSet>>,
    ) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 2 || s[0] != dims.len() {
            return Err(invalid!("token grid {:?} does not match {}x{}", s, dims.h, dims.w));
        }
        let c = s[1];
        let h = self.norm1.forward(ctx, x);
        let msg = match &self.mixer {
            Mixer::Global => global_attention(self.q.forward(ctx, h), self.k.forward(ctx, h), self.v.forward(ctx, h), self.heads),
            Mixer::Linear => linear_attention(self.q.forward(ctx, h), self.k.forward(ctx, h), self.v.forward(ctx, h), self.heads),
            Mixer::Lsa { window } => {
                let cand = Arc::new(window_candidates(dims, *window));
                self.q.forward(ctx, h).candidate_attention(self.k.forward(ctx, h), self.v.forward(ctx, h), cand, self.heads, None)
            }
            Mixer::Gsa { rate } => {
                let pooled = h.reshape(&[dims.h, dims.w, c]).avg_pool(*rate);
                let m = pooled.shape()[0] * pooled.shape()[1];
                let pooled = pooled.reshape(&[m, c]);
                global_attention(self.q.forward(ctx, h), self.k.forward(ctx, pooled), self.v.forward(ctx, pooled), self.heads)
            }
            Mixer::Topk => {
                let cand = topk.ok_or_else(|| invalid!("top-k self-attention needs coarse match probabilities"))?;
                if cand.queries() != dims.len() || cand.target_len() != dims.len() {
                    return Err(invalid!("top-k key sets do not match the token grid"));
                }
                self.q.forward(ctx, h).candidate_attention(self.k.forward(ctx, h), self.v.forward(ctx, h), Arc::clone(cand), self.heads, None)
            }
            Mixer::Lka { local, dilated } => {
                let u = self.v.forward(ctx, h).gelu();
                let a = dilated.forward(ctx, local.forward(ctx, u.reshape(&[dims.h, dims.w, c])));
                u.mul(self.k.forward(ctx, a.reshape(&[dims.len(), c])))
            }
            Mixer::Pola { query_window, kv_window, table } => {
                let (cand, rel, _) = overlap_candidates(dims, *query_window, *kv_window)?;
                let bias = SlotBias { table: ctx.p(*table), index: Arc::new(rel) };
                self.q.forward(ctx, h).candidate_attention(
                    self.k.forward(ctx, h),
                    self.v.forward(ctx, h),
                    Arc::new(cand),
                    self.heads,
                    Some(bias),
                )
            }
            Mixer::Candidates => return Err(invalid!("candidate mixer is cross-attention only")),
        };
        Ok(self.finish(ctx, x, msg))
    }

    /// Cross-attention block updating `x` from `src`.
    pub fn forward_cross<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        x: Var<'t, T>,
        src: Var<'t, T>,
        route: CrossRoute<'_>,
    ) -> Result<Var<'t, T>> {
        if x.shape().get(1) != src.shape().get(1) {
            return Err(invalid!("cross-attention channel mismatch {:?} vs {:?}", x.shape(), src.shape()));
        }
        let hs = self.norm1.forward(ctx, src);
        match route {
            CrossRoute::Dense => {
                let h = self.norm1.forward(ctx, x);
                let (q, k, v) = (self.q.forward(ctx, h), self.k.forward(ctx, hs), self.v.forward(ctx, hs));
                let msg = match self.mixer {
                    Mixer::Linear => linear_attention(q, k, v, self.heads),
                    Mixer::Global | Mixer::Candidates => global_attention(q, k, v, self.heads),
                    _ => return Err(invalid!("dense cross-attention needs a global or linear mixer")),
                };
                Ok(self.finish(ctx, x, msg))
            }
            CrossRoute::Sparse { rows, cand } => {
                if cand.queries() != rows.len() {
                    return Err(invalid!("{} query rows but {} candidate lists", rows.len(), cand.queries()));
                }
                if cand.target_len() > src.shape()[0] {
                    return Err(invalid!("candidates address {} cells, source has {}", cand.target_len(), src.shape()[0]));
                }
                if rows.is_empty() {
                    return Ok(x);
                }
                let xq = x.gather_rows(Arc::clone(rows));
                let h = self.norm1.forward(ctx, xq);
                let msg = self.q.forward(ctx, h).candidate_attention(
                    self.k.forward(ctx, hs),
                    self.v.forward(ctx, hs),
                    Arc::clone(cand),
                    self.heads,
                    None,
                );
                let mut delta = self.finish(ctx, xq, msg).sub(xq);
                if (0..cand.queries()).any(|i| !cand.supervisable(i)) {
                    let keep: Vec<T> = (0..cand.queries())
                        .map(|i| if cand.supervisable(i) { T::one() } else { T::zero() })
                        .collect();
                    delta = delta.mul_col(ctx.constant(Tensor::from_vec(&[keep.len()], keep)));
                }
                Ok(x.add(delta.scatter_rows(Arc::clone(rows), x.shape()[0])))
            }
        }
    }
}

/// Key sets of the top-k self-attention for one view. Every coarse cell `p`
/// of this view takes its best match `j` in the other view, then the `k`
/// cells of this view that `j` matches best (column of the coarse matrix for
/// view A, row for view B). Fine tokens reuse their coarse parent's list,
/// keeping their offset inside the parent block.
pub fn topk_self_candidates<T: Scalar>(
    prob: &Tensor<T>,
    coarse_this: GridDims,
    coarse_other: GridDims,
    this_is_a: bool,
    factor: usize,
    k: usize,
) -> CandidateSet {
    let (na, nb) = if this_is_a {
        (coarse_this.len(), coarse_other.len())
    } else {
        (coarse_other.len(), coarse_this.len())
    };
    assert_eq!(prob.shape(), &[na, nb], "coarse probability shape");
    let pd = prob.data();
    let at = |own: usize, other: usize| -> f64 {
        if this_is_a {
            pd[own * nb + other].as_f64()
        } else {
            pd[other * nb + own].as_f64()
        }
    };
    let n_own = coarse_this.len();
    let n_other = coarse_other.len();
    let kk = k.min(n_own);
    let lists: Vec<Vec<usize>> = (0..n_own)
        .map(|p| {
            let best = top_k_indices(n_other, 1, |j| at(p, j))[0];
            top_k_indices(n_own, kk, |q| at(q, best))
        })
        .collect();
    let fine = GridDims::new(coarse_this.h * factor, coarse_this.w * factor);
    let mut idx = Vec::with_capacity(fine.len() * k);
    let mut valid = Vec::with_capacity(fine.len() * k);
    for i in 0..fine.len() {
        let (r, c) = fine.cell(i);
        let parent = coarse_this.index(r / factor, c / factor);
        let (oy, ox) = (r % factor, c % factor);
        for s in 0..k {
            if let Some(&q) = lists[parent].get(s) {
                let (qr, qc) = coarse_this.cell(q);
                idx.push(fine.index(qr * factor + oy, qc * factor + ox));
                valid.push(true);
            } else {
                idx.push(0);
                valid.push(false);
            }
        }
    }
    CandidateSet::new(fine.len(), k, fine.len(), idx, valid).expect("top-k indices lie on the fine grid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::testutil::rand_tensor;
    use rand::SeedableRng;

    fn cfg_small() -> AttentionConfig {
        let mut cfg = AttentionConfig::default();
        cfg.heads = 2;
        cfg.lsa.window = 3;
        cfg.gsa.rate = 2;
        cfg.topk.k = 5;
        cfg.lka.kernel = 5;
        cfg.lka.dilation = 2;
        cfg.pola.query_window = 2;
        cfg.pola.kv_window = 4;
        cfg
    }

    fn self_block(v: SelfVariant, c: usize, cfg: &AttentionConfig) -> (ParamStore<f64>, AttnBlock) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let b = AttnBlock::new_self(&mut store, "blk", c, v, cfg, &mut rng);
        if let Mixer::Pola { table, .. } = &b.mixer {
            let t = rand_tensor(store.get(*table).value().shape(), 5);
            store.set(*table, t);
        }
        (store, b)
    }

    fn run_self(store: &ParamStore<f64>, b: &AttnBlock, x: &Tensor<f64>, dims: GridDims, topk: Option<&Arc<CandidateSet>>) -> Tensor<f64> {
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, store);
        (*b.forward_self(&ctx, ctx.constant(x.clone()), dims, topk).unwrap().value()).clone()
    }

    #[test]
    fn lsa_on_single_window_equals_global() {
        let mut cfg = AttentionConfig::default();
        cfg.lsa.window = 7;
        let (store, b) = self_block(SelfVariant::Lsa, 16, &cfg);
        let dims = GridDims::new(7, 7);
        let x = rand_tensor(&[49, 16], 1);
        let a = run_self(&store, &b, &x, dims, None);
        let g = run_self(&store, &b.with_mixer(Mixer::Global), &x, dims, None);
        assert!(a.max_abs_diff(&g) < 1e-12);
    }

    #[test]
    fn gsa_rate_one_equals_global() {
        let mut cfg = AttentionConfig::default();
        cfg.gsa.rate = 1;
        let (store, b) = self_block(SelfVariant::Gsa, 8, &cfg);
        let dims = GridDims::new(5, 6);
        let x = rand_tensor(&[30, 8], 2);
        let a = run_self(&store, &b, &x, dims, None);
        let g = run_self(&store, &b.with_mixer(Mixer::Global), &x, dims, None);
        assert!(a.max_abs_diff(&g) < 1e-12);
    }

    #[test]
    fn constant_tokens_stay_constant() {
        let cfg = cfg_small();
        let dims = GridDims::new(6, 6);
        let row = rand_tensor(&[8], 3);
        let x = Tensor::from_vec(&[36, 8], (0..36).flat_map(|_| row.data().to_vec()).collect());
        let prob = rand_tensor(&[9, 9], 4).map(|v| v.abs());
        let topk = Arc::new(topk_self_candidates(&prob, GridDims::new(3, 3), GridDims::new(3, 3), true, 2, cfg.topk.k));
        for v in SelfVariant::ALL_EFFICIENT {
            let (store, b) = self_block(v, 8, &cfg);
            let y = run_self(&store, &b, &x, dims, Some(&topk));
            for i in 1..36 {
                let d: f64 = y.row(i).iter().zip(y.row(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(d < 1e-12, "{v:?} row {i} differs by {d}");
            }
        }
    }

    #[test]
    fn topk_requires_probabilities() {
        let (store, b) = self_block(SelfVariant::Topk, 8, &cfg_small());
        let tape = Tape::<f64>::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let x = ctx.constant(rand_tensor(&[4, 8], 1));
        assert!(b.forward_self(&ctx, x, GridDims::new(2, 2), None).is_err());
    }

    #[test]
    fn full_candidate_cross_equals_dense() {
        let cfg = AttentionConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let b = AttnBlock::new_cross(&mut store, "x", 16, None, &cfg, &mut rng);
        let (xa, xb) = (rand_tensor(&[12, 16], 1), rand_tensor(&[10, 16], 2));
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let (va, vb) = (ctx.constant(xa), ctx.constant(xb));
        let rows = Arc::new((0..12).collect::<Vec<_>>());
        let cand = Arc::new(CandidateSet::full(12, 10));
        let sparse = b.forward_cross(&ctx, va, vb, CrossRoute::Sparse { rows: &rows, cand: &cand }).unwrap().value();
        let dense = b.forward_cross(&ctx, va, vb, CrossRoute::Dense).unwrap().value();
        assert!(sparse.max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn masked_candidates_do_not_leak() {
        let cfg = AttentionConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let b = AttnBlock::new_cross(&mut store, "x", 8, None, &cfg, &mut rng);
        let fine = GridDims::new(8, 8);
        let cand = Arc::new(super::super::build_candidates_lw(&[(0, 0), (1, 1)], fine, 4, 16).unwrap());
        let rows = Arc::new(vec![3, 5]);
        let used: std::collections::HashSet<usize> = (0..2)
            .flat_map(|i| cand.slots(i).iter().zip(cand.valid_row(i)).filter(|p| *p.1).map(|p| *p.0).collect::<Vec<_>>())
            .collect();
        let xa = rand_tensor(&[6, 8], 1);
        let xb = rand_tensor(&[64, 8], 2);
        let mut xb2 = xb.clone();
        for j in 0..64 {
            if !used.contains(&j) {
                xb2.row_mut(j).iter_mut().for_each(|v| *v = 1e3 * (*v + 1.0));
            }
        }
        let eval = |src: &Tensor<f64>| {
            let tape = Tape::no_grad();
            let ctx = Ctx::new(&tape, &store);
            let out = b
                .forward_cross(&ctx, ctx.constant(xa.clone()), ctx.constant(src.clone()), CrossRoute::Sparse { rows: &rows, cand: &cand })
                .unwrap();
            (*out.value()).clone()
        };
        assert_eq!(eval(&xb).data(), eval(&xb2).data());
    }

    #[test]
    fn singleton_candidate_is_value_projection() {
        let cfg = AttentionConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let b = AttnBlock::new_cross(&mut store, "x", 8, None, &cfg, &mut rng);
        let cand = Arc::new(CandidateSet::new(1, 3, 4, vec![2, 0, 1], vec![true, false, false]).unwrap());
        let rows = Arc::new(vec![0]);
        let (xa, xb) = (rand_tensor(&[1, 8], 3), rand_tensor(&[4, 8], 4));
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let got = b
            .forward_cross(&ctx, ctx.constant(xa.clone()), ctx.constant(xb.clone()), CrossRoute::Sparse { rows: &rows, cand: &cand })
            .unwrap()
            .value();
        let src = ctx.constant(Tensor::from_vec(&[1, 8], xb.row(2).to_vec()));
        let msg = b.v.forward(&ctx, b.norm1.forward(&ctx, src));
        let want = b.finish(&ctx, ctx.constant(xa), msg).value();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }
}
