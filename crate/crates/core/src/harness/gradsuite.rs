//! Named finite-difference gradient checks for the differentiable operators.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    build_candidates_lw, build_candidates_mt, topk_self_candidates, AttentionConfig, AttnBlock, CandidateSet,
    CrossRoute, GridDims, SelfVariant,
};
use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::gradcheck::{check_param_grads, GradReport};
use crate::matcher::dual_softmax;
use crate::nn::{Ctx, ParamStore};
use crate::refine::Refiner;
use crate::training::{coarse_loss, focal_loss, refine_loss};
use crate::Tensor;

pub const GRAD_OPS: [&str; 12] = [
    "self-linear",
    "self-lsa",
    "self-gsa",
    "self-topk",
    "self-lka",
    "self-pola",
    "cross-lw",
    "cross-mt",
    "focal",
    "coarse",
    "refine",
    "dual-softmax",
];

const STEP: f64 = 1e-5;
const CHANNELS: usize = 8;

fn small_attention() -> AttentionConfig {
    let mut cfg = AttentionConfig::default();
    cfg.heads = 2;
    cfg.lsa.window = 3;
    cfg.gsa.rate = 2;
    cfg.topk.k = 5;
    cfg.lka.kernel = 5;
    cfg.lka.dilation = 2;
    cfg.pola.query_window = 2;
    cfg.pola.kv_window = 4;
    cfg.lw.window = 3;
    cfg.lw.k = 9;
    cfg.mt.parents = 2;
    cfg.mt.k = 8;
    cfg
}

/// Inputs and a fixed random read-out are stored as frozen-free parameters so
/// one finite-difference pass covers weights and inputs alike.
struct Bench {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Bench {
    fn new(seed: u64) -> Self {
        Self { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn tensor(&mut self, name: &str, shape: &[usize]) -> crate::nn::ParamId {
        let t = Tensor::uniform(shape, 1.0, &mut self.rng);
        self.store.add(name, t)
    }

    fn readout(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::uniform(shape, 1.0, &mut self.rng)
    }

    fn check<F>(mut self, tol: f64, f: F) -> GradReport
    where
        F: for<'t> Fn(&Ctx<'t, f64>) -> Var<'t, f64>,
    {
        let ids = self.store.trainable_ids();
        check_param_grads(&mut self.store, &ids, f, STEP, tol)
    }
}

fn project<'t>(ctx: &Ctx<'t, f64>, y: Var<'t, f64>, w: &Tensor<f64>) -> Var<'t, f64> {
    y.mul(ctx.constant(w.clone())).sum()
}

/// Runs the named check on a `grid × grid` token grid (6 by default in the
/// CLI). Tolerance is the max relative error per tensor.
pub fn grad_check(op: &str, grid: usize, tol: f64, seed: u64) -> Result<GradReport> {
    if grid < 2 || grid % 2 != 0 || grid > 12 {
        return Err(invalid!("grad-check grid must be even and in [2, 12], got {grid}"));
    }
    let cfg = small_attention();
    let dims = GridDims::new(grid, grid);
    let n = dims.len();
    let coarse = GridDims::new(grid / 2, grid / 2);
    let mut b = Bench::new(seed);
    let report = match op {
        "self-linear" | "self-lsa" | "self-gsa" | "self-topk" | "self-lka" | "self-pola" => {
            let variant: SelfVariant = serde_json::from_value(serde_json::Value::String(op[5..].into()))
                .map_err(|e| invalid!("unknown variant: {e}"))?;
            let block = AttnBlock::new_self(&mut b.store, "blk", CHANNELS, variant, &cfg, &mut b.rng);
            let x = b.tensor("input", &[n, CHANNELS]);
            let prob = b.readout(&[coarse.len(), coarse.len()]).map(|v| v.abs());
            let topk = Arc::new(topk_self_candidates(&prob, coarse, coarse, true, 2, cfg.topk.k));
            let w = b.readout(&[n, CHANNELS]);
            b.check(tol, |ctx| {
                let y = block.forward_self(ctx, ctx.p(x), dims, Some(&topk)).expect("valid self-attention instance");
                project(ctx, y, &w)
            })
        }
        "cross-lw" | "cross-mt" => {
            let block = AttnBlock::new_cross(&mut b.store, "blk", CHANNELS, None, &cfg, &mut b.rng);
            let xa = b.tensor("input_a", &[n, CHANNELS]);
            let xb = b.tensor("input_b", &[n, CHANNELS]);
            let rows: Arc<Vec<usize>> = Arc::new((0..n).step_by(3).collect());
            let parent = |i: usize| coarse.cell((i * 7 + 3) % coarse.len());
            let cand: Arc<CandidateSet> = Arc::new(if op == "cross-lw" {
                let targets: Vec<_> = rows.iter().map(|&i| parent(i)).collect();
                build_candidates_lw(&targets, dims, cfg.lw.window, cfg.lw.k)?
            } else {
                let lists: Vec<_> = rows.iter().map(|&i| vec![parent(i), parent(i + 5)]).collect();
                build_candidates_mt(&lists, dims, cfg.mt.k)?
            });
            let w = b.readout(&[n, CHANNELS]);
            b.check(tol, |ctx| {
                let y = block
                    .forward_cross(ctx, ctx.p(xa), ctx.p(xb), CrossRoute::Sparse { rows: &rows, cand: &cand })
                    .expect("valid cross-attention instance");
                project(ctx, y, &w)
            })
        }
        "focal" => {
            let logits = b.tensor("logits", &[2, 4]);
            b.check(tol, |ctx| focal_loss(ctx.p(logits).softmax_rows(None), &[(0, 1), (1, 3)], 2.0))
        }
        "coarse" | "dual-softmax" => {
            let fa = b.tensor("feat_a", &[coarse.len(), CHANNELS]);
            let fb = b.tensor("feat_b", &[coarse.len(), CHANNELS]);
            let gt: Vec<(usize, usize)> = (0..coarse.len()).step_by(2).map(|i| (i, (i + 1) % coarse.len())).collect();
            let w = b.readout(&[coarse.len(), coarse.len()]);
            let is_loss = op == "coarse";
            b.check(tol, |ctx| {
                let p = dual_softmax(ctx.p(fa), ctx.p(fb), 1.0);
                if is_loss {
                    coarse_loss(p, &gt, 2.0)
                } else {
                    project(ctx, p, &w)
                }
            })
        }
        "refine" => {
            let refiner = Refiner::new(&mut b.store, CHANNELS, &cfg, &mut b.rng);
            let fa = b.tensor("map_a", &[n, CHANNELS]);
            let fb = b.tensor("map_b", &[n, CHANNELS]);
            let pairs = [(dims.index(1, 1), dims.index(2, 1)), (n - 1, n / 2)];
            let gt = [[0.3, -0.4], [-1.2, 0.7]];
            b.check(tol, |ctx| {
                let (_, res) = refiner.forward(ctx, ctx.p(fa), dims, ctx.p(fb), dims, &pairs).expect("valid refinement instance");
                refine_loss(res, &[0, 1], &gt)
            })
        }
        _ => return Err(invalid!("unknown grad-check op {op:?}; expected one of {}", GRAD_OPS.join(", "))),
    };
    Ok(report)
}
