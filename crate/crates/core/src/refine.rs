//! Sub-pixel refinement on 5×5 stride-2 feature patches.

use std::sync::Arc;

use rand::Rng;

use crate::attention::{AttentionConfig, AttnBlock, CandidateSet, CrossRoute, GridDims};
use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::nn::{Ctx, ParamStore};
use crate::{Scalar, Tensor};

pub const WINDOW: usize = 5;
pub const CENTRE: usize = WINDOW * WINDOW / 2;
/// Pixels per cell of the feature map used for refinement.
pub const STRIDE: usize = 2;

/// Row indices of the `5×5` edge-clamped patch around each centre cell.
pub fn unfold_indices(dims: GridDims, centres: &[usize]) -> Vec<usize> {
    let half = (WINDOW / 2) as isize;
    let mut out = Vec::with_capacity(centres.len() * WINDOW * WINDOW);
    for &c in centres {
        let (r, col) = dims.cell(c);
        for dy in -half..=half {
            for dx in -half..=half {
                let rr = (r as isize + dy).clamp(0, dims.h as isize - 1) as usize;
                let cc = (col as isize + dx).clamp(0, dims.w as isize - 1) as usize;
                out.push(dims.index(rr, cc));
            }
        }
    }
    out
}

/// `(dx, dy)` cell offset of every patch slot.
pub fn offsets<T: Scalar>() -> Tensor<T> {
    let half = (WINDOW / 2) as f64;
    let mut v = Vec::with_capacity(WINDOW * WINDOW * 2);
    for dy in 0..WINDOW {
        for dx in 0..WINDOW {
            v.push(dx as f64 - half);
            v.push(dy as f64 - half);
        }
    }
    Tensor::from_f64(&[WINDOW * WINDOW, 2], &v)
}

/// Spatial expectation of a `[M, 25]` probability patch → `[M, 2]` cells.
pub fn expectation<'t, T: Scalar>(prob: Var<'t, T>) -> Var<'t, T> {
    prob.matmul(prob.tape().constant(offsets()))
}

/// Candidate lists confining every token to its own patch.
fn patch_candidates(m: usize, src_patch: bool) -> Arc<CandidateSet> {
    let n = WINDOW * WINDOW;
    let nq = if src_patch { m * n } else { m };
    let mut idx = Vec::with_capacity(nq * n);
    for q in 0..nq {
        let p = if src_patch { q / n } else { q };
        idx.extend(p * n..(p + 1) * n);
    }
    Arc::new(CandidateSet::new(nq, n, m * n, idx, vec![true; nq * n]).expect("patch indices are in range"))
}

/// One self and one cross block over the patch pair, then a soft-argmax of
/// the centre token's correlation with the target patch.
#[derive(Clone, Debug)]
pub struct Refiner {
    self_block: AttnBlock,
    cross_block: AttnBlock,
}

impl Refiner {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, c: usize, cfg: &AttentionConfig, rng: &mut R) -> Self {
        Self {
            self_block: AttnBlock::new_cross(store, "refine.self", c, None, cfg, rng),
            cross_block: AttnBlock::new_cross(store, "refine.cross", c, None, cfg, rng),
        }
    }

    /// Attended patch tokens `[M·25, C]` for both sides.
    pub fn attend<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        pa: Var<'t, T>,
        pb: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let n = pa.shape()[0];
        let m = n / (WINDOW * WINDOW);
        let rows = Arc::new((0..n).collect::<Vec<_>>());
        let cand = patch_candidates(m, true);
        let route = || CrossRoute::Sparse { rows: &rows, cand: &cand };
        let pa = self.self_block.forward_cross(ctx, pa, pa, route())?;
        let pb = self.self_block.forward_cross(ctx, pb, pb, route())?;
        let pa2 = self.cross_block.forward_cross(ctx, pa, pb, route())?;
        let pb2 = self.cross_block.forward_cross(ctx, pb, pa, route())?;
        Ok((pa2, pb2))
    }

    /// Correlation probabilities `[M, 25]` and the residual `[M, 2]` in cells
    /// for `(source cell, target cell)` pairs on stride-2 maps `[N, C]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        fa: Var<'t, T>,
        dims_a: GridDims,
        fb: Var<'t, T>,
        dims_b: GridDims,
        pairs: &[(usize, usize)],
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        if pairs.is_empty() {
            return Err(invalid!("refinement needs at least one pair"));
        }
        let src: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let tgt: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let pa = fa.gather_rows(Arc::new(unfold_indices(dims_a, &src)));
        let pb = fb.gather_rows(Arc::new(unfold_indices(dims_b, &tgt)));
        let (pa, pb) = self.attend(ctx, pa, pb)?;
        let c = pa.shape()[1];
        let n = WINDOW * WINDOW;
        let centres = pa.gather_rows(Arc::new((0..pairs.len()).map(|m| m * n + CENTRE).collect()));
        let scores = centres.candidate_scores(pb, patch_candidates(pairs.len(), false), T::of(1.0 / (c as f64).sqrt()));
        let prob = scores.softmax_rows(None);
        Ok((prob, expectation(prob)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    fn one_hot(slot: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[1, 25]);
        t.data_mut()[slot] = 1.0;
        t
    }

    #[test]
    fn expectation_of_point_masses() {
        let tape = Tape::no_grad();
        assert_eq!(expectation(tape.constant(one_hot(CENTRE))).value().data(), &[0.0, 0.0]);
        assert_eq!(expectation(tape.constant(one_hot(0))).value().data(), &[-2.0, -2.0]);
        let uniform = Tensor::full(&[1, 25], 1.0 / 25.0);
        assert!(expectation(tape.constant(uniform)).value().max_abs() < 1e-15);
    }

    #[test]
    fn clamped_unfold_at_corner() {
        let dims = GridDims::new(4, 4);
        let idx = unfold_indices(dims, &[0]);
        assert_eq!(idx[0], 0);
        assert_eq!(idx[CENTRE], 0);
        assert_eq!(idx[24], dims.index(2, 2));
    }
}
