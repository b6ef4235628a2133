use crate::attention::GridDims;
use crate::autograd::Var;
use crate::{Scalar, Tensor};

/// `softmax_rows(S) ⊙ softmax_cols(S)` with `S = fa·fbᵀ / τ`.
pub fn dual_softmax<'t, T: Scalar>(fa: Var<'t, T>, fb: Var<'t, T>, temperature: f64) -> Var<'t, T> {
    let s = fa.matmul_ex(fb, false, true).scale(T::of(1.0 / temperature));
    let rows = s.softmax_rows(None);
    let cols = s.transpose().softmax_rows(None).transpose();
    rows.mul(cols)
}

/// Mutual nearest neighbours of the coarse matrix above `threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseResult {
    pub dims_a: GridDims,
    pub dims_b: GridDims,
    /// Best target of every source cell (lowest index on ties).
    pub row_top1: Vec<usize>,
    /// `(source, target, probability)`, ascending in source.
    pub matches: Vec<(usize, usize, f64)>,
}

pub fn mutual_matches<T: Scalar>(prob: &Tensor<T>, dims_a: GridDims, dims_b: GridDims, threshold: f64) -> CoarseResult {
    let (na, nb) = (dims_a.len(), dims_b.len());
    assert_eq!(prob.shape(), &[na, nb], "coarse probability shape");
    let p = prob.data();
    let row_top1: Vec<usize> = (0..na)
        .map(|i| {
            let row = &p[i * nb..(i + 1) * nb];
            (0..nb).fold(0, |b, j| if row[j] > row[b] { j } else { b })
        })
        .collect();
    let mut col_top1 = vec![0usize; nb];
    let mut col_best = vec![T::neg_infinity(); nb];
    for i in 0..na {
        for j in 0..nb {
            if p[i * nb + j] > col_best[j] {
                col_best[j] = p[i * nb + j];
                col_top1[j] = i;
            }
        }
    }
    let matches = (0..na)
        .filter_map(|i| {
            let j = row_top1[i];
            let v = p[i * nb + j].as_f64();
            (col_top1[j] == i && v > threshold).then_some((i, j, v))
        })
        .collect();
    CoarseResult { dims_a, dims_b, row_top1, matches }
}
