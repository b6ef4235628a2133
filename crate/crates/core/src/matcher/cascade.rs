use std::sync::Arc;

use crate::attention::{CandidateSet, GridDims};
use crate::autograd::Var;
use crate::Scalar;

/// Child queries of a set of parent cells, sorted by cell index.
#[derive(Clone, Debug, PartialEq)]
pub struct Children {
    pub rows: Vec<usize>,
    /// Position of each child's parent in the parent list.
    pub parent_of: Vec<usize>,
}

/// Each parent cell `(r, c)` spawns `(2r+dr, 2c+dc)` on the finer grid.
pub fn spawn_children(parents: &[usize], coarse: GridDims, fine: GridDims) -> Children {
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(parents.len() * 4);
    for (p, &cell) in parents.iter().enumerate() {
        let (r, c) = coarse.cell(cell);
        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            if let Some(j) = fine.checked((2 * r + dr) as isize, (2 * c + dc) as isize) {
                pairs.push((j, p));
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup_by_key(|x| x.0);
    Children { rows: pairs.iter().map(|x| x.0).collect(), parent_of: pairs.iter().map(|x| x.1).collect() }
}

/// Local similarity `S = ⟨q, t⟩ / τ` over each query's candidates and its
/// masked softmax. Returns `(S, P)`, both `[Q, k]`.
pub fn local_probabilities<'t, T: Scalar>(
    queries: Var<'t, T>,
    targets: Var<'t, T>,
    cand: &Arc<CandidateSet>,
    temperature: f64,
) -> (Var<'t, T>, Var<'t, T>) {
    let s = queries.candidate_scores(targets, Arc::clone(cand), T::of(1.0 / temperature));
    let p = s.softmax_rows(Some(Arc::new(cand.valid().to_vec())));
    (s, p)
}

/// Best valid slot of query `i`: `(slot, target, value)`. Ties go to the
/// lower target index.
pub fn argmax_valid(cand: &CandidateSet, values: &[f64], i: usize) -> Option<(usize, usize, f64)> {
    let k = cand.k();
    let mut best: Option<(usize, usize, f64)> = None;
    for (s, (&j, &ok)) in cand.slots(i).iter().zip(cand.valid_row(i)).enumerate() {
        if !ok {
            continue;
        }
        let v = values[i * k + s];
        if best.is_none_or(|b| v > b.2 || (v == b.2 && j < b.1)) {
            best = Some((s, j, v));
        }
    }
    best
}

/// Reverse view of a sparse score matrix: for every target cell, the
/// `(query, score)` pairs of queries listing it, ascending in query.
pub fn reverse_candidates(cand: &CandidateSet, scores: &[f64]) -> Vec<Vec<(usize, f64)>> {
    let k = cand.k();
    let mut rev = vec![Vec::new(); cand.target_len()];
    for i in 0..cand.queries() {
        for (s, (&j, &ok)) in cand.slots(i).iter().zip(cand.valid_row(i)).enumerate() {
            if ok {
                rev[j].push((i, scores[i * k + s]));
            }
        }
    }
    rev
}

/// Mutual argmax on the sparse bipartite graph: query `i` survives iff its
/// best target `j` has `i` as its best query among all queries listing `j`
/// (lower query index on ties).
pub fn cycle_filter(cand: &CandidateSet, scores: &[f64]) -> Vec<bool> {
    let rev = reverse_candidates(cand, scores);
    let back: Vec<Option<usize>> = rev
        .iter()
        .map(|list| {
            list.iter()
                .fold(None, |b: Option<(usize, f64)>, &(i, v)| match b {
                    Some((_, bv)) if bv >= v => b,
                    _ => Some((i, v)),
                })
                .map(|b| b.0)
        })
        .collect();
    (0..cand.queries())
        .map(|i| argmax_valid(cand, scores, i).is_some_and(|(_, j, _)| back[j] == Some(i)))
        .collect()
}

/// Detached outcome of one cascade stage for the A-side queries.
#[derive(Clone, Debug, PartialEq)]
pub struct StageResult {
    pub rows: Vec<usize>,
    pub cand: Arc<CandidateSet>,
    pub scores: Vec<f64>,
    pub prob: Vec<f64>,
    /// `(slot, target, probability)` per query.
    pub top1: Vec<Option<(usize, usize, f64)>>,
    pub matched: Vec<bool>,
}

impl StageResult {
    pub fn new(rows: Vec<usize>, cand: Arc<CandidateSet>, scores: Vec<f64>, prob: Vec<f64>, threshold: f64) -> Self {
        let top1: Vec<_> = (0..cand.queries()).map(|i| argmax_valid(&cand, &prob, i)).collect();
        let cyc = cycle_filter(&cand, &scores);
        let matched = top1.iter().zip(&cyc).map(|(t, &c)| c && t.is_some_and(|t| t.2 > threshold)).collect();
        Self { rows, cand, scores, prob, top1, matched }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::Tensor;

    #[test]
    fn children_of_one_parent() {
        let coarse = GridDims::new(4, 8);
        let ch = spawn_children(&[coarse.index(2, 5)], coarse, coarse.doubled());
        let fine = coarse.doubled();
        let cells: Vec<_> = ch.rows.iter().map(|&i| fine.cell(i)).collect();
        assert_eq!(cells, vec![(4, 10), (4, 11), (5, 10), (5, 11)]);
        assert!(spawn_children(&[], coarse, fine).rows.is_empty());
    }

    #[test]
    fn closed_form_margin() {
        // unit query equal to candidate 0, orthogonal to candidate 1
        let tape = Tape::no_grad();
        let q = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]));
        let t = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let cand = Arc::new(CandidateSet::new(1, 2, 2, vec![0, 1], vec![true, true]).unwrap());
        let (_, p) = local_probabilities::<f64>(q, t, &cand, 0.1);
        let want = 1.0 / (1.0 + (-10f64).exp());
        assert!((p.value().data()[0] - want).abs() < 1e-12);
        assert!(want > 0.9999 && want < 1.0);
    }

    #[test]
    fn singleton_candidate_gets_all_mass() {
        let tape = Tape::no_grad();
        let q = tape.constant(Tensor::from_f64(&[1, 2], &[0.3, -0.7]));
        let t = tape.constant(Tensor::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let cand = Arc::new(CandidateSet::new(1, 3, 3, vec![0, 1, 2], vec![false, true, false]).unwrap());
        let (_, p) = local_probabilities::<f64>(q, t, &cand, 0.1);
        assert_eq!(p.value().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn cycle_rejects_non_mutual() {
        // query 0 prefers target 1, but target 1 prefers query 1
        let cand = CandidateSet::new(2, 2, 2, vec![0, 1, 0, 1], vec![true; 4]).unwrap();
        let s = [0.1, 0.5, 0.0, 0.9];
        assert_eq!(cycle_filter(&cand, &s), vec![false, true]);
        let diag = [0.9, 0.1, 0.1, 0.9];
        assert_eq!(cycle_filter(&cand, &diag), vec![true, true]);
    }
}
