use crate::error::{invalid, Result};

/// Row-major grid extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct GridDims {
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, r: usize, c: usize) -> usize {
        r * self.w + c
    }

    pub fn cell(&self, i: usize) -> (usize, usize) {
        (i / self.w, i % self.w)
    }

    /// Index of `(r, c)` when inside the grid.
    pub fn checked(&self, r: isize, c: isize) -> Option<usize> {
        (r >= 0 && c >= 0 && (r as usize) < self.h && (c as usize) < self.w)
            .then(|| self.index(r as usize, c as usize))
    }

    pub fn doubled(&self) -> Self {
        Self::new(self.h * 2, self.w * 2)
    }
}

/// Per-query list of `k` target indices with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    nq: usize,
    k: usize,
    target_len: usize,
    idx: Vec<usize>,
    valid: Vec<bool>,
}

impl CandidateSet {
    /// Invalid slots may carry any index; they are rewritten to 0.
    pub fn new(nq: usize, k: usize, target_len: usize, mut idx: Vec<usize>, valid: Vec<bool>) -> Result<Self> {
        if idx.len() != nq * k || valid.len() != nq * k {
            return Err(invalid!("candidate arrays must hold {}x{} entries", nq, k));
        }
        for (i, v) in idx.iter_mut().zip(&valid) {
            if !*v {
                *i = 0;
            } else if *i >= target_len {
                return Err(invalid!("candidate index {} outside target of {} cells", i, target_len));
            }
        }
        Ok(Self { nq, k, target_len, idx, valid })
    }

    /// Every query sees every target cell.
    pub fn full(nq: usize, target_len: usize) -> Self {
        let idx = (0..nq).flat_map(|_| 0..target_len).collect();
        Self {
            nq,
            k: target_len,
            target_len,
            idx,
            valid: vec![true; nq * target_len],
        }
    }

    pub fn queries(&self) -> usize {
        self.nq
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn target_len(&self) -> usize {
        self.target_len
    }

    pub fn slots(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }

    pub fn valid_row(&self, i: usize) -> &[bool] {
        &self.valid[i * self.k..(i + 1) * self.k]
    }

    pub fn indices(&self) -> &[usize] {
        &self.idx
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Queries with no valid slot cannot be attended or supervised.
    pub fn supervisable(&self, i: usize) -> bool {
        self.valid_row(i).iter().any(|&v| v)
    }

    /// Slot holding `target` for query `i`, if any.
    pub fn slot_of(&self, i: usize, target: usize) -> Option<usize> {
        self.slots(i)
            .iter()
            .zip(self.valid_row(i))
            .position(|(&j, &v)| v && j == target)
    }
}

/// Local-window candidates: a `w×w` block on the finer grid around twice the
/// parent target, spanning `[2p − w/2, 2p + w/2 − 1]` per axis.
pub fn build_candidates_lw(
    parent_targets: &[(usize, usize)],
    fine: GridDims,
    window: usize,
    k: usize,
) -> Result<CandidateSet> {
    if window * window != k {
        return Err(invalid!("LW window {window} gives {} candidates, configured k = {k}", window * window));
    }
    let half = (window / 2) as isize;
    let mut idx = Vec::with_capacity(parent_targets.len() * k);
    let mut valid = Vec::with_capacity(parent_targets.len() * k);
    for &(pr, pc) in parent_targets {
        let (r0, c0) = (2 * pr as isize - half, 2 * pc as isize - half);
        for dr in 0..window as isize {
            for dc in 0..window as isize {
                match fine.checked(r0 + dr, c0 + dc) {
                    Some(j) => {
                        idx.push(j);
                        valid.push(true);
                    }
                    None => {
                        idx.push(0);
                        valid.push(false);
                    }
                }
            }
        }
    }
    CandidateSet::new(parent_targets.len(), k, fine.len(), idx, valid)
}

/// Multi-modal top-k candidates: the 2×2 children of each ranked parent cell.
/// Queries with fewer than `k/4` parents get trailing invalid slots.
pub fn build_candidates_mt(parent_topk: &[Vec<(usize, usize)>], fine: GridDims, k: usize) -> Result<CandidateSet> {
    if k % 4 != 0 {
        return Err(invalid!("MT candidate count {k} is not a multiple of 4"));
    }
    let t = k / 4;
    let mut idx = Vec::with_capacity(parent_topk.len() * k);
    let mut valid = Vec::with_capacity(parent_topk.len() * k);
    for parents in parent_topk {
        if parents.len() > t {
            return Err(invalid!("MT got {} parents, 4t must equal k = {k}", parents.len()));
        }
        for &(pr, pc) in parents {
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                match fine.checked((2 * pr + dr) as isize, (2 * pc + dc) as isize) {
                    Some(j) => {
                        idx.push(j);
                        valid.push(true);
                    }
                    None => {
                        idx.push(0);
                        valid.push(false);
                    }
                }
            }
        }
        for _ in parents.len() * 4..k {
            idx.push(0);
            valid.push(false);
        }
    }
    CandidateSet::new(parent_topk.len(), k, fine.len(), idx, valid)
}

/// Non-overlapping `win×win` windows: every cell attends to the cells of its
/// own window. Windows past the grid edge are partially masked.
pub fn window_candidates(dims: GridDims, win: usize) -> CandidateSet {
    let k = win * win;
    let mut idx = Vec::with_capacity(dims.len() * k);
    let mut valid = Vec::with_capacity(dims.len() * k);
    for i in 0..dims.len() {
        let (r, c) = dims.cell(i);
        let (r0, c0) = ((r / win * win) as isize, (c / win * win) as isize);
        for dr in 0..win as isize {
            for dc in 0..win as isize {
                let j = dims.checked(r0 + dr, c0 + dc);
                idx.push(j.unwrap_or(0));
                valid.push(j.is_some());
            }
        }
    }
    CandidateSet::new(dims.len(), k, dims.len(), idx, valid).expect("window indices are in range")
}

/// Overlapping key windows: query windows of `qwin` cells, each attending to the
/// `kwin×kwin` block centred on it. Also returns the relative-position table
/// index of every slot and the table side length.
pub fn overlap_candidates(dims: GridDims, qwin: usize, kwin: usize) -> Result<(CandidateSet, Vec<usize>, usize)> {
    if kwin < qwin || (kwin - qwin) % 2 != 0 {
        return Err(invalid!("overlapping window {kwin} must exceed query window {qwin} by an even amount"));
    }
    let margin = ((kwin - qwin) / 2) as isize;
    let reach = qwin as isize - 1 + margin;
    let side = (2 * reach + 1) as usize;
    let k = kwin * kwin;
    let mut idx = Vec::with_capacity(dims.len() * k);
    let mut valid = Vec::with_capacity(dims.len() * k);
    let mut rel = Vec::with_capacity(dims.len() * k);
    for i in 0..dims.len() {
        let (r, c) = dims.cell(i);
        let (r0, c0) = ((r / qwin * qwin) as isize - margin, (c / qwin * qwin) as isize - margin);
        for dr in 0..kwin as isize {
            for dc in 0..kwin as isize {
                let (kr, kc) = (r0 + dr, c0 + dc);
                let j = dims.checked(kr, kc);
                idx.push(j.unwrap_or(0));
                valid.push(j.is_some());
                let (oy, ox) = (kr - r as isize + reach, kc - c as isize + reach);
                rel.push(oy as usize * side + ox as usize);
            }
        }
    }
    Ok((CandidateSet::new(dims.len(), k, dims.len(), idx, valid)?, rel, side))
}

/// Indices of the `k` largest values (descending, lower index first on ties).
pub fn top_k_indices<F: Fn(usize) -> f64>(n: usize, k: usize, score: F) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let key = |i: &usize| score(*i);
    if k < n {
        order.select_nth_unstable_by(k, |a, b| key(b).total_cmp(&key(a)).then(a.cmp(b)));
        order.truncate(k);
    }
    order.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.cmp(b)));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lw_block_placement() {
        let fine = GridDims::new(20, 20);
        let c = build_candidates_lw(&[(3, 3)], fine, 6, 36).unwrap();
        let cells: Vec<_> = c.slots(0).iter().map(|&j| fine.cell(j)).collect();
        assert_eq!(cells.first(), Some(&(3, 3)));
        assert_eq!(cells.last(), Some(&(8, 8)));
        assert!(c.valid_row(0).iter().all(|&v| v));
    }

    #[test]
    fn lw_border_masking() {
        let c = build_candidates_lw(&[(0, 0)], GridDims::new(20, 20), 6, 36).unwrap();
        assert_eq!(c.valid_row(0).iter().filter(|&&v| v).count(), 9);
        assert!(build_candidates_lw(&[(0, 0)], GridDims::new(20, 20), 10, 64).is_err());
    }

    #[test]
    fn mt_children() {
        let fine = GridDims::new(8, 8);
        let c = build_candidates_mt(&[vec![(1, 2)]], fine, 4).unwrap();
        let cells: Vec<_> = c.slots(0).iter().map(|&j| fine.cell(j)).collect();
        assert_eq!(cells, vec![(2, 4), (2, 5), (3, 4), (3, 5)]);
        assert!(build_candidates_mt(&[vec![(0, 0); 3]], fine, 8).is_err());
    }

    #[test]
    fn overlap_windows_cover_query_window() {
        let dims = GridDims::new(6, 6);
        let (c, rel, side) = overlap_candidates(dims, 2, 4).unwrap();
        assert_eq!(side, 5);
        for i in 0..dims.len() {
            assert!(c.slot_of(i, i).is_some());
            let s = c.slot_of(i, i).unwrap();
            assert_eq!(rel[i * 16 + s], 2 * side + 2);
        }
    }

    #[test]
    fn top_k_ties_prefer_low_index() {
        let v = [1.0, 3.0, 3.0, 0.5, 3.0];
        assert_eq!(top_k_indices(5, 2, |i| v[i]), vec![1, 2]);
        assert_eq!(top_k_indices(5, 9, |i| v[i]), vec![1, 2, 4, 0, 3]);
    }
}
