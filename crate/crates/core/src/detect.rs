//! Keypoint selection on confidence maps: overlapping max-pool NMS,
//! per-tile top-1 and a plain confidence threshold.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::GridDims;
use crate::error::{invalid, Result};
use crate::geometry::MatchSet;

/// Top-1 confidence per source cell at one scale; cells without a match hold
/// 0 and are invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    pub dims: GridDims,
    /// Pixels per cell.
    pub stride: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    scale: f64,
    height: usize,
    width: usize,
    dtype: String,
}

impl ConfidenceMap {
    pub fn empty(dims: GridDims, stride: usize) -> Self {
        Self { dims, stride, values: vec![0.0; dims.len()], valid: vec![false; dims.len()] }
    }

    /// Writes one entry per match whose source lies on this grid.
    pub fn from_matches(dims: GridDims, stride: usize, matches: &MatchSet) -> Self {
        let mut m = Self::empty(dims, stride);
        for e in &matches.entries {
            if let Some(i) = m.cell_of(e.xa, e.ya) {
                m.values[i] = e.conf as f32;
                m.valid[i] = true;
            }
        }
        m
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let s = self.stride as f64;
        self.dims.checked((y / s).floor() as isize, (x / s).floor() as isize)
    }

    fn score(&self, i: usize) -> f32 {
        if self.valid[i] {
            self.values[i]
        } else {
            f32::NEG_INFINITY
        }
    }

    /// `<path>` gets the raw little-endian `f32` grid, `<path>.json` the header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in &self.values {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        let header = Header {
            scale: 1.0 / self.stride as f64,
            height: self.dims.h,
            width: self.dims.w,
            dtype: "float32".into(),
        };
        std::fs::write(header_path(path), serde_json::to_vec_pretty(&header)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let header: Header = serde_json::from_slice(&std::fs::read(header_path(path))?)?;
        if header.dtype != "float32" || !(header.scale > 0.0) {
            return Err(invalid!("unsupported confidence map header"));
        }
        let raw = std::fs::read(path)?;
        let dims = GridDims::new(header.height, header.width);
        if raw.len() != dims.len() * 4 {
            return Err(invalid!("confidence map payload has {} bytes, expected {}", raw.len(), dims.len() * 4));
        }
        let values: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let valid = values.iter().map(|&v| v > 0.0).collect();
        Ok(Self { dims, stride: (1.0 / header.scale).round() as usize, values, valid })
    }
}

fn header_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Separable sliding max over a clamped `(2r+1)²` window.
fn window_max(map: &ConfidenceMap, r: usize) -> Vec<f32> {
    let GridDims { h, w } = map.dims;
    let mut rows = vec![f32::NEG_INFINITY; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = (lo..=hi).map(|j| map.score(y * w + j)).fold(f32::NEG_INFINITY, f32::max);
        }
    }
    let mut out = vec![f32::NEG_INFINITY; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|i| rows[i * w + x]).fold(f32::NEG_INFINITY, f32::max);
        }
    }
    out
}

/// Cells kept by NMS: valid, equal to the max of their clamped window, and
/// the lowest raster index attaining it within that window.
pub fn nms_cells(map: &ConfidenceMap, kernel: usize) -> Result<Vec<bool>> {
    if kernel < 3 || kernel % 2 == 0 {
        return Err(invalid!("NMS kernel must be odd and at least 3, got {kernel}"));
    }
    let r = kernel / 2;
    let GridDims { h, w } = map.dims;
    let mx = window_max(map, r);
    let mut keep = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !map.valid[i] || map.values[i] != mx[i] {
                continue;
            }
            // an earlier cell in the window with the same score wins
            let earlier = (y.saturating_sub(r)..=y).any(|yy| {
                let xe = if yy == y { x } else { (x + r + 1).min(w) };
                (x.saturating_sub(r)..xe).any(|xx| map.score(yy * w + xx) == map.values[i])
            });
            keep[i] = !earlier;
        }
    }
    Ok(keep)
}

fn retain(matches: &MatchSet, map: &ConfidenceMap, keep: &[bool]) -> MatchSet {
    MatchSet::new(
        matches
            .entries
            .iter()
            .filter(|m| map.cell_of(m.xa, m.ya).is_some_and(|i| keep[i]))
            .copied()
            .collect(),
    )
}

pub fn nms_detect(map: &ConfidenceMap, kernel: usize, matches: &MatchSet) -> Result<MatchSet> {
    Ok(retain(matches, map, &nms_cells(map, kernel)?))
}

/// Best valid cell of every non-overlapping `cell × cell` tile.
pub fn grid_cells(map: &ConfidenceMap, cell: usize) -> Result<Vec<bool>> {
    if cell < 2 {
        return Err(invalid!("grid cell must be at least 2, got {cell}"));
    }
    let GridDims { h, w } = map.dims;
    let mut keep = vec![false; h * w];
    for ty in (0..h).step_by(cell) {
        for tx in (0..w).step_by(cell) {
            let mut best: Option<usize> = None;
            for y in ty..(ty + cell).min(h) {
                for x in tx..(tx + cell).min(w) {
                    let i = y * w + x;
                    if map.valid[i] && best.is_none_or(|b| map.values[i] > map.values[b]) {
                        best = Some(i);
                    }
                }
            }
            if let Some(b) = best {
                keep[b] = true;
            }
        }
    }
    Ok(keep)
}

pub fn grid_detect(map: &ConfidenceMap, cell: usize, matches: &MatchSet) -> Result<MatchSet> {
    Ok(retain(matches, map, &grid_cells(map, cell)?))
}

pub fn threshold_filter(matches: &MatchSet, thr: f64) -> Result<MatchSet> {
    if !(0.0..=1.0).contains(&thr) {
        return Err(invalid!("confidence threshold {thr} outside [0, 1]"));
    }
    Ok(MatchSet::new(matches.entries.iter().filter(|m| m.conf > thr).copied().collect()))
}

/// Post-filter applied to a final match set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Detector {
    #[default]
    None,
    Nms { kernel: usize },
    Grid { cell: usize },
    Threshold { thr: f64 },
}

impl Detector {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Detector::Nms { kernel } if kernel < 3 || kernel % 2 == 0 => {
                Err(invalid!("NMS kernel must be odd and at least 3, got {kernel}"))
            }
            Detector::Grid { cell } if cell < 2 => Err(invalid!("grid cell must be at least 2")),
            Detector::Threshold { thr } if !(0.0..=1.0).contains(&thr) => Err(invalid!("threshold outside [0, 1]")),
            _ => Ok(()),
        }
    }

    pub fn apply(&self, map: &ConfidenceMap, matches: &MatchSet) -> Result<MatchSet> {
        match *self {
            Detector::None => Ok(matches.clone()),
            Detector::Nms { kernel } => nms_detect(map, kernel, matches),
            Detector::Grid { cell } => grid_detect(map, cell, matches),
            Detector::Threshold { thr } => threshold_filter(matches, thr),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Detector::None => "none".into(),
            Detector::Nms { kernel } => format!("nms-{kernel}"),
            Detector::Grid { cell } => format!("grid-{cell}"),
            Detector::Threshold { thr } => format!("thr-{thr}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Match;

    fn map_from(h: usize, w: usize, v: Vec<f32>) -> ConfidenceMap {
        let valid = v.iter().map(|&x| x > 0.0).collect();
        ConfidenceMap { dims: GridDims::new(h, w), stride: 2, values: v, valid }
    }

    fn matches_on(map: &ConfidenceMap) -> MatchSet {
        let mut out = Vec::new();
        for i in 0..map.dims.len() {
            if map.valid[i] {
                let (r, c) = map.dims.cell(i);
                let (x, y) = (c as f64 * 2.0 + 1.0, r as f64 * 2.0 + 1.0);
                out.push(Match { xa: x, ya: y, xb: x, yb: y, conf: map.values[i] as f64, scale: 0.5 });
            }
        }
        MatchSet::new(out)
    }

    #[test]
    fn single_peak_survives() {
        let mut v = vec![0.0; 64];
        v[27] = 0.7;
        let m = map_from(8, 8, v);
        let out = nms_detect(&m, 5, &matches_on(&m)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!((out.entries[0].xa, out.entries[0].ya), (7.0, 7.0));
    }

    #[test]
    fn even_or_small_kernels_rejected() {
        let m = map_from(2, 2, vec![0.5; 4]);
        assert!(nms_cells(&m, 4).is_err());
        assert!(nms_cells(&m, 1).is_err());
    }

    #[test]
    fn constant_map_grid_picks_top_left() {
        let m = map_from(8, 8, vec![0.5; 64]);
        let keep = grid_cells(&m, 4).unwrap();
        let kept: Vec<usize> = (0..64).filter(|&i| keep[i]).collect();
        assert_eq!(kept, vec![0, 4, 32, 36]);
    }

    #[test]
    fn threshold_extremes() {
        let m = map_from(2, 2, vec![0.3, 0.6, 1.0, 0.0]);
        let ms = matches_on(&m);
        assert_eq!(threshold_filter(&ms, 0.0).unwrap().len(), 3);
        assert_eq!(threshold_filter(&ms, 1.0).unwrap().len(), 0);
        assert_eq!(threshold_filter(&ms, 0.5).unwrap().len(), 2);
    }

    #[test]
    fn map_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = map_from(3, 4, vec![0.0, 0.25, 0.5, 0.0, 0.9, 0.0, 0.0, 0.1, 0.0, 0.0, 0.3, 1.0]);
        let p = dir.path().join("conf.f32");
        m.save(&p).unwrap();
        assert_eq!(ConfidenceMap::load(&p).unwrap(), m);
    }
}
