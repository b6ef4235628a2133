use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::report::{EvalReport, EvalRow, Task};
use crate::detect::{ConfidenceMap, Detector};
use crate::error::{invalid, Result};
use crate::geometry::synth::{gt_correspondence, SyntheticPair, Truth};
use crate::geometry::{
    auc_table, corner_error, estimate_homography_ransac, estimate_pose_ransac, pose_error, Match, MatchSet,
};
use crate::matcher::{Model, PipelineOut};
use crate::nn::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub homography_ransac_px: f64,
    pub pose_ransac_px: f64,
    pub ransac_iters: usize,
    pub auc_px: Vec<f64>,
    pub auc_deg: Vec<f64>,
    /// Square sizes of a resolution sweep; empty evaluates at native size.
    pub sizes: Vec<usize>,
    /// Active scales (a prefix of the model's); `None` uses all.
    pub scales: Option<Vec<usize>>,
    /// Extra detector rows next to the run's main detector.
    pub detectors: Vec<Detector>,
    pub max_pairs: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            homography_ransac_px: 1.0,
            pose_ransac_px: 1.0,
            ransac_iters: 2000,
            auc_px: vec![3.0, 5.0, 10.0],
            auc_deg: vec![5.0, 10.0, 20.0],
            sizes: Vec::new(),
            scales: None,
            detectors: Vec::new(),
            max_pairs: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.homography_ransac_px > 0.0) || !(self.pose_ransac_px > 0.0) || self.ransac_iters == 0 {
            return Err(invalid!("eval RANSAC threshold and iterations must be positive"));
        }
        if self.auc_px.iter().chain(&self.auc_deg).any(|&t| !(t > 0.0)) || self.auc_px.is_empty() || self.auc_deg.is_empty() {
            return Err(invalid!("AUC thresholds must be positive and non-empty"));
        }
        if self.sizes.iter().any(|&s| s < 16) {
            return Err(invalid!("sweep sizes must be at least 16"));
        }
        for d in &self.detectors {
            d.validate()?;
        }
        Ok(())
    }
}

/// Where matches come from.
pub enum MatchSource<'a> {
    Model { model: &'a Model, store: &'a ParamStore<f32> },
    /// Exact ground-truth correspondences on the 8-pixel grid.
    Oracle,
}

/// Exact matches from cell centres at `stride` whose target is visible.
pub fn oracle_matches(pair: &SyntheticPair, stride: usize) -> Result<MatchSet> {
    let gt = gt_correspondence(pair, stride)?;
    let mut entries = Vec::new();
    for i in 0..gt.dims.len() {
        if !gt.valid[i] {
            continue;
        }
        let (r, c) = gt.dims.cell(i);
        let p = [(c as f64 + 0.5) * stride as f64, (r as f64 + 0.5) * stride as f64];
        let q = gt.target[i];
        entries.push(Match { xa: p[0], ya: p[1], xb: q[0], yb: q[1], conf: 1.0, scale: 1.0 / stride as f64 });
    }
    Ok(MatchSet::new(entries))
}

/// Matches of one pair in its native pixel frame, the confidence map, the
/// pre-detection count and per-stage timings.
pub struct PairMatches {
    pub raw: MatchSet,
    pub confidence: ConfidenceMap,
    pub out: Option<PipelineOut>,
}

pub fn match_pair(source: &MatchSource<'_>, pair: &SyntheticPair, size: Option<usize>, scales: Option<&[usize]>) -> Result<PairMatches> {
    match source {
        MatchSource::Oracle => {
            let raw = oracle_matches(pair, 8)?;
            let (w, h) = pair.size();
            let dims = crate::attention::GridDims::new(h.div_ceil(8), w.div_ceil(8));
            Ok(PairMatches { confidence: ConfidenceMap::from_matches(dims, 8, &raw), raw, out: None })
        }
        MatchSource::Model { model, store } => {
            let (w, h) = pair.size();
            let (a, b, sx, sy) = match size {
                Some(s) if (s, s) != (w, h) => {
                    (pair.image_a.resize(s, s), pair.image_b.resize(s, s), w as f64 / s as f64, h as f64 / s as f64)
                }
                _ => (pair.image_a.clone(), pair.image_b.clone(), 1.0, 1.0),
            };
            let out = model.run(store, &a, &b, scales)?;
            let mut raw = out.matches.clone();
            for m in &mut raw.entries {
                m.xa *= sx;
                m.xb *= sx;
                m.ya *= sy;
                m.yb *= sy;
            }
            Ok(PairMatches { raw, confidence: out.confidence.clone(), out: Some(out) })
        }
    }
}

/// Detection runs on the confidence map in the matcher's frame, so matches
/// are mapped back to it before filtering.
fn detect(det: &Detector, pm: &PairMatches, pair: &SyntheticPair, size: Option<usize>) -> Result<MatchSet> {
    let (w, h) = pair.size();
    let (sx, sy) = match size {
        Some(s) => (w as f64 / s as f64, h as f64 / s as f64),
        None => (1.0, 1.0),
    };
    let mut local = pm.raw.clone();
    for m in &mut local.entries {
        m.xa /= sx;
        m.ya /= sy;
    }
    let kept = det.apply(&pm.confidence, &local)?;
    let mut out = kept;
    for m in &mut out.entries {
        m.xa *= sx;
        m.ya *= sy;
    }
    Ok(out)
}

fn pair_error(task: Task, pair: &SyntheticPair, ms: &MatchSet, cfg: &EvalConfig, seed: u64) -> Result<Option<f64>> {
    let (w, h) = pair.size();
    match (&pair.truth, task) {
        (Truth::Homography(gt), Task::Homography) => Ok(estimate_homography_ransac(ms, cfg.homography_ransac_px, cfg.ransac_iters, seed)
            .ok()
            .map(|(est, _)| corner_error(&est, gt, w as f64, h as f64))
            .filter(|e| e.is_finite())),
        (Truth::TwoView(tv), Task::Pose) => {
            let gt = tv.pose()?;
            Ok(estimate_pose_ransac(ms, &tv.k, &tv.k, cfg.pose_ransac_px, cfg.ransac_iters, seed)
                .ok()
                .map(|(est, _)| pose_error(&est, &gt))
                .filter(|e| e.is_finite()))
        }
        _ => Err(invalid!("pair truth does not fit a {} evaluation", task.label())),
    }
}

/// Evaluates every (size, detector) combination over `pairs`.
pub fn evaluate(
    task: Task,
    source: &MatchSource<'_>,
    pairs: &[SyntheticPair],
    detectors: &[Detector],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(invalid!("evaluation corpus is empty"));
    }
    let pairs = &pairs[..cfg.max_pairs.unwrap_or(pairs.len()).min(pairs.len())];
    let thresholds = match task {
        Task::Homography => cfg.auc_px.clone(),
        Task::Pose => cfg.auc_deg.clone(),
    };
    let sizes: Vec<Option<usize>> = if cfg.sizes.is_empty() { vec![None] } else { cfg.sizes.iter().map(|&s| Some(s)).collect() };
    let scales: Vec<usize> = match (source, &cfg.scales) {
        (_, Some(s)) => s.clone(),
        (MatchSource::Model { model, .. }, None) => model.cfg.matcher.scales.clone(),
        (MatchSource::Oracle, None) => vec![8],
    };
    let mut rows = Vec::new();
    for &size in &sizes {
        let mut per_det: Vec<(Vec<Option<f64>>, usize)> = vec![(Vec::new(), 0); detectors.len()];
        let mut raw_total = 0usize;
        let mut timings: BTreeMap<String, f64> = BTreeMap::new();
        for (pi, pair) in pairs.iter().enumerate() {
            let pm = match_pair(source, pair, size, Some(&scales))?;
            raw_total += pm.raw.len();
            if let Some(out) = &pm.out {
                for t in &out.timings {
                    *timings.entry(t.name.clone()).or_default() += t.ms / pairs.len() as f64;
                }
            }
            for (d, det) in detectors.iter().enumerate() {
                let ms = detect(det, &pm, pair, size)?;
                per_det[d].1 += ms.len();
                per_det[d].0.push(pair_error(task, pair, &ms, cfg, seed ^ pi as u64)?);
            }
        }
        for (det, (errors, kept)) in detectors.iter().zip(per_det) {
            let finite: Vec<f64> = errors.iter().map(|e| e.unwrap_or(f64::INFINITY)).collect();
            rows.push(EvalRow {
                detector: det.label(),
                size,
                scales: scales.clone(),
                thresholds: thresholds.clone(),
                auc: auc_table(&finite, &thresholds)?,
                pairs: errors.len(),
                failures: errors.iter().filter(|e| e.is_none()).count(),
                mean_matches: kept as f64 / pairs.len() as f64,
                mean_raw_matches: raw_total as f64 / pairs.len() as f64,
                errors,
                timings_ms: timings.clone(),
            });
        }
    }
    Ok(EvalReport { task, source: match source { MatchSource::Oracle => "oracle".into(), MatchSource::Model { .. } => "model".into() }, rows })
}
