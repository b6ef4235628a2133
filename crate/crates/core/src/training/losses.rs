use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Unary, Var};
use crate::Scalar;

pub const PROB_FLOOR: f64 = 1e-6;

/// Classification loss applied to ground-truth probabilities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Focal,
    CrossEntropy,
}

/// `mean((1 − P)^γ · −ln P)` over the picked `(row, col)` entries of `prob`,
/// with `P` clamped to at least `1e-6`. An empty pick list contributes 0.
pub fn focal_loss<'t, T: Scalar>(prob: Var<'t, T>, picks: &[(usize, usize)], gamma: f64) -> Var<'t, T> {
    if picks.is_empty() {
        log::warn!("no supervised entries; loss term is zero");
        return prob.tape().constant(crate::Tensor::scalar(T::zero()));
    }
    let p = prob.pick(Arc::new(picks.to_vec())).unary(Unary::ClampMin(PROB_FLOOR));
    let nll = p.ln().scale(-T::one());
    let weighted = if gamma == 0.0 {
        nll
    } else {
        let u = p.scale(-T::one()).add_scalar(T::one());
        let w = if gamma == 2.0 {
            u.square()
        } else if gamma == 1.0 {
            u
        } else {
            // 1 − P ≥ 0; the floor only matters where P = 1 and the term is 0
            u.unary(Unary::ClampMin(1e-30)).ln().scale(T::of(gamma)).exp()
        };
        w.mul(nll)
    };
    weighted.mean()
}

pub fn classification_loss<'t, T: Scalar>(prob: Var<'t, T>, picks: &[(usize, usize)], kind: LossKind, gamma: f64) -> Var<'t, T> {
    match kind {
        LossKind::Focal => focal_loss(prob, picks, gamma),
        LossKind::CrossEntropy => focal_loss(prob, picks, 0.0),
    }
}

/// Focal loss of the full dual-softmax matrix at ground-truth `(i, j)` cells.
pub fn coarse_loss<'t, T: Scalar>(prob: Var<'t, T>, gt: &[(usize, usize)], gamma: f64) -> Var<'t, T> {
    focal_loss(prob, gt, gamma)
}

/// Mean squared L2 distance between predicted and ground-truth residuals,
/// both `[M, 2]` in cells. `rows` selects the supervised subset.
pub fn refine_loss<'t, T: Scalar>(residual: Var<'t, T>, rows: &[usize], gt: &[[f64; 2]]) -> Var<'t, T> {
    assert_eq!(rows.len(), gt.len(), "one ground-truth residual per supervised row");
    let tape = residual.tape();
    if rows.is_empty() {
        log::warn!("no refinement targets; loss term is zero");
        return tape.constant(crate::Tensor::scalar(T::zero()));
    }
    let flat: Vec<f64> = gt.iter().flat_map(|r| r.iter().copied()).collect();
    let target = tape.constant(crate::Tensor::from_f64(&[rows.len(), 2], &flat));
    let d = residual.gather_rows(Arc::new(rows.to_vec())).sub(target);
    d.square().sum().scale(T::of(1.0 / rows.len() as f64))
}
