use crate::attention::{CandidateSet, GridDims};
use crate::geometry::synth::GtField;
use crate::refine;

/// Supervised `(query, ground-truth slot)` pairs of one scale.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SupervisionSet {
    pub stride: usize,
    pub entries: Vec<(usize, usize)>,
}

impl SupervisionSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Every source cell with a valid target: `(i, j)` of the full coarse matrix.
pub fn coarse_supervision(gt: &GtField, dims_b: GridDims) -> SupervisionSet {
    let entries = (0..gt.dims.len())
        .filter_map(|i| gt.target_cell(i, gt.stride, dims_b).map(|(r, c)| (i, dims_b.index(r, c))))
        .collect();
    SupervisionSet { stride: gt.stride, entries }
}

/// Queries (source cells `rows`) whose ground-truth target cell is one of
/// their valid candidates; others are left out.
pub fn build_supervision(rows: &[usize], cand: &CandidateSet, gt: &GtField, dims_b: GridDims) -> SupervisionSet {
    assert_eq!(rows.len(), cand.queries(), "one candidate list per query");
    let entries = rows
        .iter()
        .enumerate()
        .filter_map(|(q, &cell)| {
            let (r, c) = gt.target_cell(cell, gt.stride, dims_b)?;
            cand.slot_of(q, dims_b.index(r, c)).map(|s| (q, s))
        })
        .collect();
    SupervisionSet { stride: gt.stride, entries }
}

/// Centre of stride-2 cell `i`.
pub fn half_centre(dims: GridDims, i: usize) -> [f64; 2] {
    let s = refine::STRIDE as f64;
    let (r, c) = dims.cell(i);
    [(c as f64 + 0.5) * s, (r as f64 + 0.5) * s]
}

/// Ground-truth refinement residuals (cells of the stride-2 map). `points`
/// are `(source point, target estimate)`, `pairs` the stride-2 cells the
/// refiner used and `truth` the exact target of each source point. Rows whose
/// residual leaves the 5×5 window are skipped.
pub fn refine_targets(
    points: &[([f64; 2], [f64; 2])],
    pairs: &[(usize, usize)],
    truth: &[Option<[f64; 2]>],
    dims_a: GridDims,
    dims_b: GridDims,
) -> (Vec<usize>, Vec<[f64; 2]>) {
    let half = (refine::WINDOW / 2) as f64;
    let s = refine::STRIDE as f64;
    let mut rows = Vec::new();
    let mut res = Vec::new();
    for (m, (&(p, _), &(ha, hb))) in points.iter().zip(pairs).enumerate() {
        let Some(q) = truth[m] else { continue };
        let ca = half_centre(dims_a, ha);
        let cb = half_centre(dims_b, hb);
        let r = [(q[0] - (p[0] - ca[0]) - cb[0]) / s, (q[1] - (p[1] - ca[1]) - cb[1]) / s];
        if r[0].abs() <= half && r[1].abs() <= half {
            rows.push(m);
            res.push(r);
        }
    }
    (rows, res)
}
