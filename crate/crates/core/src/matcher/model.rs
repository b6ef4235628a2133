use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cascade::{local_probabilities, reverse_candidates, spawn_children, StageResult};
use super::coarse::{dual_softmax, mutual_matches, CoarseResult};
use super::{BlockKind, MatcherConfig};
use crate::attention::{
    build_candidates_lw, build_candidates_mt, sinusoid, top_k_indices, topk_self_candidates, AttentionConfig,
    AttnBlock, CandidateSet, CrossRoute, CrossVariant, GridDims, PeMode, SelfVariant,
};
use crate::autograd::{Tape, Var};
use crate::detect::ConfidenceMap;
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid, Ladder};
use crate::error::{invalid, Result};
use crate::geometry::{Match, MatchSet};
use crate::imageio::Image;
use crate::nn::{Ctx, ParamStore};
use crate::refine::{self, Refiner};
use crate::Scalar;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub matcher: MatcherConfig,
    /// Cascade stages and refinement read a ladder side network fed by the
    /// (frozen) encoder pyramid.
    pub ladder: bool,
}

impl ModelConfig {
    pub fn validate(&self, attention: &AttentionConfig) -> Result<()> {
        self.encoder.validate()?;
        self.matcher.validate()?;
        let mut used = Vec::new();
        for &s in &self.matcher.scales {
            used.push(self.encoder.channels_at(s).ok_or_else(|| invalid!("no encoder level at stride {s}"))?);
        }
        used.push(self.encoder.channels[0]);
        attention.validate(&used)
    }
}

/// Which maps the cascade reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Encoder,
    Ladder,
}

/// Pyramids of both images; `stage_*` substitute ladder maps when enabled.
pub struct PairFeatures<'t, T: Scalar> {
    pub a: FeaturePyramid<'t, T>,
    pub b: FeaturePyramid<'t, T>,
    pub source: FeatureSource,
}

/// How parents are chosen for the next stage.
pub enum SpawnPolicy<'a> {
    /// Queries that passed the cycle filter and the confidence gate.
    Matched,
    /// Up to `cap` source cells with `eligible(stride, cell)`, regardless of
    /// the gate; children are still centred on the predicted top-1.
    Train { eligible: &'a dyn Fn(usize, usize) -> bool, cap: usize, seed: u64 },
}

pub struct StageOut<'t, T: Scalar> {
    pub stride: usize,
    pub dims_a: GridDims,
    pub dims_b: GridDims,
    /// A-side probabilities `[Q, k]`.
    pub prob: Var<'t, T>,
    pub result: StageResult,
    pub rows_b: Vec<usize>,
    pub cand_b: Arc<CandidateSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub ms: f64,
}

pub struct MatchingOut<'t, T: Scalar> {
    pub feats: PairFeatures<'t, T>,
    pub coarse_stride: usize,
    /// Requested strides, coarse first.
    pub scales: Vec<usize>,
    pub coarse_prob: Var<'t, T>,
    pub coarse: CoarseResult,
    pub stages: Vec<StageOut<'t, T>>,
    /// No parent survived some stage; the final level is empty.
    pub short_circuit: bool,
    pub timings: Vec<StageTiming>,
}

impl<'t, T: Scalar> MatchingOut<'t, T> {
    /// `(source cell, target cell, confidence)` of the final level at `stride`.
    pub fn final_matches(&self) -> Result<(usize, GridDims, GridDims, Vec<(usize, usize, f64)>)> {
        if self.short_circuit {
            let s = *self.scales.last().unwrap();
            return Ok((s, self.feats.a.dims(s)?, self.feats.b.dims(s)?, Vec::new()));
        }
        Ok(if let Some(st) = self.stages.last() {
            let r = &st.result;
            let list = (0..r.rows.len())
                .filter(|&i| r.matched[i])
                .map(|i| {
                    let t = r.top1[i].unwrap();
                    (r.rows[i], t.1, t.2)
                })
                .collect();
            (st.stride, st.dims_a, st.dims_b, list)
        } else {
            let c = &self.coarse;
            (self.coarse_stride, c.dims_a, c.dims_b, c.matches.clone())
        })
    }
}

/// Result of the full pipeline on one image pair.
#[derive(Clone, Debug)]
pub struct PipelineOut {
    pub matches: MatchSet,
    pub confidence: ConfidenceMap,
    /// Matches surviving each level, coarse first.
    pub level_counts: Vec<(usize, usize)>,
    /// Unrefined matches of every level at cell centres, coarse first.
    pub levels: Vec<(usize, MatchSet)>,
    pub timings: Vec<StageTiming>,
}

struct CascadeStage {
    stride: usize,
    blocks: Vec<(BlockKind, AttnBlock)>,
}

/// The matcher: encoder (+ ladder), coarse interleaved attention, cascade
/// stages and refinement.
pub struct Model {
    pub cfg: ModelConfig,
    pub attention: AttentionConfig,
    pub encoder: Encoder,
    pub ladder: Option<Ladder>,
    coarse: Vec<AttnBlock>,
    stages: Vec<CascadeStage>,
    refiner: Option<Refiner>,
}

/// Parents entering a stage: A cell, its B target, and the ranked target
/// lists used by multi-modal candidates.
struct Parents {
    a: Vec<usize>,
    a_target: Vec<usize>,
    a_ranked: Vec<Vec<usize>>,
    b: Vec<usize>,
    b_partner: Vec<usize>,
    b_ranked: Vec<Vec<usize>>,
}

impl Model {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, attention: &AttentionConfig, seed: u64) -> Result<Self> {
        cfg.validate(attention)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(store, &cfg.encoder, attention, &mut rng)?;
        let m = &cfg.matcher;
        let coarse_stride = m.scales[0];
        let cc = cfg.encoder.channels_at(coarse_stride).unwrap();
        let coarse = (0..m.coarse_blocks)
            .map(|i| {
                let name = format!("coarse.b{i}");
                if i % 2 == 0 {
                    AttnBlock::new_self(store, &name, cc, attention.coarse_variant, attention, &mut rng)
                } else {
                    AttnBlock::new_cross(store, &name, cc, Some(attention.coarse_variant), attention, &mut rng)
                }
            })
            .collect();
        let ladder = if cfg.ladder { Some(Ladder::new(store, &cfg.encoder, coarse_stride, &mut rng)?) } else { None };
        let mut stages = Vec::new();
        for &s in &m.scales[1..] {
            let c = cfg.encoder.channels_at(s).unwrap();
            let blocks = m
                .pattern(s)
                .iter()
                .enumerate()
                .map(|(i, &kind)| {
                    let name = format!("cascade.s{s}.b{i}");
                    let blk = match kind {
                        BlockKind::SelfAttn => AttnBlock::new_self(store, &name, c, attention.self_variant, attention, &mut rng),
                        BlockKind::Cross => AttnBlock::new_cross(store, &name, c, None, attention, &mut rng),
                    };
                    (kind, blk)
                })
                .collect();
            stages.push(CascadeStage { stride: s, blocks });
        }
        let refiner = m.refine.then(|| Refiner::new(store, cfg.encoder.channels[0], attention, &mut rng));
        Ok(Self { cfg: cfg.clone(), attention: attention.clone(), encoder, ladder, coarse, stages, refiner })
    }

    pub fn coarse_stride(&self) -> usize {
        self.cfg.matcher.scales[0]
    }

    /// Parameter-name prefixes kept frozen in ladder finetuning.
    pub fn frozen_prefixes() -> [&'static str; 2] {
        ["encoder.", "coarse."]
    }

    fn pe_mode(&self, stride: usize, dims: GridDims, training: bool) -> PeMode {
        match self.cfg.matcher.train_size {
            Some([w, h]) if !training => {
                let train = GridDims::new(h / stride, w / stride);
                if train == dims {
                    PeMode::Train
                } else {
                    PeMode::Infer { train }
                }
            }
            _ => PeMode::Train,
        }
    }

    pub fn encode<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, a: Var<'t, T>, b: Var<'t, T>) -> Result<PairFeatures<'t, T>> {
        let pa = self.encoder.forward(ctx, a)?;
        let pb = self.encoder.forward(ctx, b)?;
        match &self.ladder {
            None => Ok(PairFeatures { a: pa, b: pb, source: FeatureSource::Encoder }),
            Some(l) => {
                let s = self.coarse_stride();
                let mut la = l.forward(ctx, &pa, s)?;
                let mut lb = l.forward(ctx, &pb, s)?;
                for (p, l) in [(&pa, &mut la), (&pb, &mut lb)] {
                    for &(st, v) in &p.maps {
                        if st >= s {
                            l.maps.push((st, v));
                        }
                    }
                }
                Ok(PairFeatures { a: la, b: lb, source: FeatureSource::Ladder })
            }
        }
    }

    fn tokens<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        map: Var<'t, T>,
        stride: usize,
        training: bool,
    ) -> (Var<'t, T>, GridDims) {
        let s = map.shape();
        let dims = GridDims::new(s[0], s[1]);
        let x = map.reshape(&[dims.len(), s[2]]);
        let pe = sinusoid::<T>(dims, s[2], self.pe_mode(stride, dims, training));
        (x.add(ctx.constant(pe)), dims)
    }

    /// Encoder, coarse stage and the cascade over `scales` (a prefix of the
    /// configured scales).
    pub fn forward_matching<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        image_a: Var<'t, T>,
        image_b: Var<'t, T>,
        scales: &[usize],
        policy: &SpawnPolicy<'_>,
    ) -> Result<MatchingOut<'t, T>> {
        let m = &self.cfg.matcher;
        if scales.is_empty() || scales.len() > m.scales.len() || scales != &m.scales[..scales.len()] {
            return Err(invalid!("scales {:?} are not a prefix of the model scales {:?}", scales, m.scales));
        }
        let training = matches!(policy, SpawnPolicy::Train { .. });
        let mut timings = Vec::new();
        let mut clock = Instant::now();
        let mut lap = |name: String, clock: &mut Instant| {
            timings.push(StageTiming { name, ms: clock.elapsed().as_secs_f64() * 1e3 });
            *clock = Instant::now();
        };

        let feats = self.encode(ctx, image_a, image_b)?;
        lap("encode".into(), &mut clock);

        let s0 = scales[0];
        let (mut xa, da) = self.tokens(ctx, feats.a.require(s0)?, s0, training);
        let (mut xb, db) = self.tokens(ctx, feats.b.require(s0)?, s0, training);
        for (i, blk) in self.coarse.iter().enumerate() {
            if i % 2 == 0 {
                let na = blk.forward_self(ctx, xa, da, None)?;
                let nb = blk.forward_self(ctx, xb, db, None)?;
                (xa, xb) = (na, nb);
            } else {
                let na = blk.forward_cross(ctx, xa, xb, CrossRoute::Dense)?;
                let nb = blk.forward_cross(ctx, xb, xa, CrossRoute::Dense)?;
                (xa, xb) = (na, nb);
            }
        }
        lap("coarse_attention".into(), &mut clock);
        let norm = |x: Var<'t, T>| x.scale(T::of(1.0 / (x.shape()[1] as f64).sqrt()));
        let coarse_prob = dual_softmax(norm(xa), norm(xb), m.temperature);
        let prob_t = coarse_prob.value();
        let coarse = mutual_matches(&*prob_t, da, db, m.threshold);
        lap("coarse_matching".into(), &mut clock);

        let mut out = MatchingOut {
            feats,
            coarse_stride: s0,
            scales: scales.to_vec(),
            coarse_prob,
            coarse,
            stages: Vec::new(),
            short_circuit: false,
            timings: Vec::new(),
        };
        let t_parents = self.attention.mt.parents;
        for (si, &s) in scales.iter().enumerate().skip(1) {
            let stage = self.stages.iter().find(|st| st.stride == s).expect("stage built for every configured scale");
            let prev_stride = scales[si - 1];
            // parents of the previous level
            let parents = match out.stages.last() {
                None => {
                    let c = &out.coarse;
                    let nb = c.dims_b.len();
                    let pd = prob_t.data();
                    let rows: Vec<(usize, usize)> = match policy {
                        SpawnPolicy::Matched => c.matches.iter().map(|m| (m.0, m.1)).collect(),
                        SpawnPolicy::Train { .. } => (0..c.dims_a.len()).map(|i| (i, c.row_top1[i])).collect(),
                    };
                    let rows = select_parents(rows, policy, prev_stride);
                    let a_ranked = rows
                        .iter()
                        .map(|&(i, _)| top_k_indices(nb, t_parents, |j| pd[i * nb + j].as_f64()))
                        .collect();
                    let (b, b_partner) = unique_targets(&rows);
                    let na = c.dims_a.len();
                    let b_ranked = b.iter().map(|&j| top_k_indices(na, t_parents, |i| pd[i * nb + j].as_f64())).collect();
                    Parents {
                        a: rows.iter().map(|r| r.0).collect(),
                        a_target: rows.iter().map(|r| r.1).collect(),
                        a_ranked,
                        b,
                        b_partner,
                        b_ranked,
                    }
                }
                Some(prev) => {
                    let r = &prev.result;
                    let rows: Vec<(usize, usize)> = (0..r.rows.len())
                        .filter(|&i| match policy {
                            SpawnPolicy::Matched => r.matched[i],
                            SpawnPolicy::Train { .. } => r.top1[i].is_some(),
                        })
                        .map(|i| (i, r.top1[i].unwrap().1))
                        .collect();
                    let sel = select_parents(rows.iter().map(|&(i, j)| (r.rows[i], j)).collect(), policy, prev_stride);
                    let pos: std::collections::HashMap<usize, usize> = r.rows.iter().enumerate().map(|(i, &c)| (c, i)).collect();
                    let k = r.cand.k();
                    let a_ranked = sel
                        .iter()
                        .map(|&(cell, _)| {
                            let q = pos[&cell];
                            let order = top_k_indices(k, t_parents, |s| {
                                if r.cand.valid_row(q)[s] {
                                    r.prob[q * k + s]
                                } else {
                                    f64::NEG_INFINITY
                                }
                            });
                            order.into_iter().filter(|&s| r.cand.valid_row(q)[s]).map(|s| r.cand.slots(q)[s]).collect()
                        })
                        .collect();
                    let (b, b_partner) = unique_targets(&sel);
                    let rev = reverse_candidates(&r.cand, &r.scores);
                    let b_ranked = b
                        .iter()
                        .map(|&j| {
                            let list = &rev[j];
                            top_k_indices(list.len(), t_parents, |x| list[x].1).into_iter().map(|x| r.rows[list[x].0]).collect()
                        })
                        .collect();
                    Parents {
                        a: sel.iter().map(|r| r.0).collect(),
                        a_target: sel.iter().map(|r| r.1).collect(),
                        a_ranked,
                        b,
                        b_partner,
                        b_ranked,
                    }
                }
            };
            let (prev_da, prev_db) = match out.stages.last() {
                None => (out.coarse.dims_a, out.coarse.dims_b),
                Some(p) => (p.dims_a, p.dims_b),
            };
            if parents.a.is_empty() {
                out.short_circuit = true;
                break;
            }
            let (mut xa, da) = self.tokens(ctx, out.feats.a.require(s)?, s, training);
            let (mut xb, db) = self.tokens(ctx, out.feats.b.require(s)?, s, training);
            let ch_a = spawn_children(&parents.a, prev_da, da);
            let ch_b = spawn_children(&parents.b, prev_db, db);
            let cand_a = Arc::new(self.candidates(&ch_a.parent_of, &parents.a_target, &parents.a_ranked, prev_db, db)?);
            let cand_b = Arc::new(self.candidates(&ch_b.parent_of, &parents.b_partner, &parents.b_ranked, prev_da, da)?);
            let rows_a = Arc::new(ch_a.rows.clone());
            let rows_b = Arc::new(ch_b.rows.clone());
            let topk = if self.attention.self_variant == SelfVariant::Topk {
                let factor = s0 / s;
                let k = self.attention.topk.k;
                Some((
                    Arc::new(topk_self_candidates(&*prob_t, out.coarse.dims_a, out.coarse.dims_b, true, factor, k)),
                    Arc::new(topk_self_candidates(&*prob_t, out.coarse.dims_b, out.coarse.dims_a, false, factor, k)),
                ))
            } else {
                None
            };
            for (kind, blk) in &stage.blocks {
                match kind {
                    BlockKind::SelfAttn => {
                        let na = blk.forward_self(ctx, xa, da, topk.as_ref().map(|t| &t.0))?;
                        let nb = blk.forward_self(ctx, xb, db, topk.as_ref().map(|t| &t.1))?;
                        (xa, xb) = (na, nb);
                    }
                    BlockKind::Cross => {
                        let na = blk.forward_cross(ctx, xa, xb, CrossRoute::Sparse { rows: &rows_a, cand: &cand_a })?;
                        let nb = blk.forward_cross(ctx, xb, xa, CrossRoute::Sparse { rows: &rows_b, cand: &cand_b })?;
                        (xa, xb) = (na, nb);
                    }
                }
            }
            lap(format!("cascade_attention_s{s}"), &mut clock);
            let (ma, mb) = (norm(xa), norm(xb));
            let (sv, pv) = local_probabilities(ma.gather_rows(Arc::clone(&rows_a)), mb, &cand_a, m.temperature);
            let to_f64 = |v: Var<'t, T>| v.value().data().iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
            let result = StageResult::new(ch_a.rows, Arc::clone(&cand_a), to_f64(sv), to_f64(pv), m.threshold);
            lap(format!("cascade_matching_s{s}"), &mut clock);
            out.stages.push(StageOut { stride: s, dims_a: da, dims_b: db, prob: pv, result, rows_b: ch_b.rows, cand_b });
        }
        out.timings = timings;
        Ok(out)
    }

    fn candidates(
        &self,
        parent_of: &[usize],
        target: &[usize],
        ranked: &[Vec<usize>],
        prev_other: GridDims,
        other: GridDims,
    ) -> Result<CandidateSet> {
        match self.attention.cross_variant {
            CrossVariant::Lw => {
                let t: Vec<(usize, usize)> = parent_of.iter().map(|&p| prev_other.cell(target[p])).collect();
                build_candidates_lw(&t, other, self.attention.lw.window, self.attention.lw.k)
            }
            CrossVariant::Mt => {
                let t: Vec<Vec<(usize, usize)>> =
                    parent_of.iter().map(|&p| ranked[p].iter().map(|&c| prev_other.cell(c)).collect()).collect();
                build_candidates_mt(&t, other, self.attention.mt.k)
            }
        }
    }

    /// Refinement residuals (cells of the stride-2 map) for full-resolution
    /// `(source point, target estimate)` pairs; returns the stride-2 cell
    /// pairs used, the correlation probabilities and the residual.
    pub fn refine_points<'t, T: Scalar>(
        &self,
        feats: &PairFeatures<'t, T>,
        ctx: &Ctx<'t, T>,
        points: &[([f64; 2], [f64; 2])],
    ) -> Result<Option<(Vec<(usize, usize)>, Var<'t, T>, Var<'t, T>)>> {
        let Some(refiner) = &self.refiner else { return Ok(None) };
        if points.is_empty() {
            return Ok(None);
        }
        let fa = feats.a.require(refine::STRIDE)?;
        let fb = feats.b.require(refine::STRIDE)?;
        let (sa, sb) = (fa.shape(), fb.shape());
        let (da, db) = (GridDims::new(sa[0], sa[1]), GridDims::new(sb[0], sb[1]));
        let cell = |d: GridDims, p: [f64; 2]| {
            let s = refine::STRIDE as f64;
            let r = ((p[1] / s).floor().max(0.0) as usize).min(d.h - 1);
            let c = ((p[0] / s).floor().max(0.0) as usize).min(d.w - 1);
            d.index(r, c)
        };
        let pairs: Vec<(usize, usize)> = points.iter().map(|&(p, q)| (cell(da, p), cell(db, q))).collect();
        let (prob, res) = refiner.forward(ctx, fa.reshape(&[da.len(), sa[2]]), da, fb.reshape(&[db.len(), sb[2]]), db, &pairs)?;
        Ok(Some((pairs, prob, res)))
    }

    /// Full inference on an image pair. Images are reflect-padded to the
    /// coarse stride; matches outside the original frame are dropped.
    pub fn run<T: Scalar>(&self, store: &ParamStore<T>, a: &Image, b: &Image, scales: Option<&[usize]>) -> Result<PipelineOut> {
        let scales = scales.unwrap_or(&self.cfg.matcher.scales);
        let mult = self.coarse_stride().max(8);
        let (pa, pb) = (a.pad_to_multiple(mult), b.pad_to_multiple(mult));
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, store);
        let total = Instant::now();
        let mo = self.forward_matching(&ctx, tape.constant(pa.to_tensor()), tape.constant(pb.to_tensor()), scales, &SpawnPolicy::Matched)?;
        let inside = |p: [f64; 2], img: &Image| p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= img.width as f64 && p[1] <= img.height as f64;
        let level_set = |stride: usize, da: GridDims, db: GridDims, list: &[(usize, usize, f64)]| {
            let c = |d: GridDims, i: usize| {
                let (r, col) = d.cell(i);
                [(col as f64 + 0.5) * stride as f64, (r as f64 + 0.5) * stride as f64]
            };
            let entries = list
                .iter()
                .map(|&(i, j, conf)| (c(da, i), c(db, j), conf))
                .filter(|&(p, q, _)| inside(p, a) && inside(q, b))
                .map(|(p, q, conf)| Match { xa: p[0], ya: p[1], xb: q[0], yb: q[1], conf: conf.clamp(0.0, 1.0), scale: 1.0 / stride as f64 })
                .collect();
            MatchSet::new(entries)
        };
        let mut levels = vec![(mo.coarse_stride, level_set(mo.coarse_stride, mo.coarse.dims_a, mo.coarse.dims_b, &mo.coarse.matches))];
        for st in &mo.stages {
            let r = &st.result;
            let list: Vec<_> = (0..r.rows.len())
                .filter(|&i| r.matched[i])
                .map(|i| {
                    let t = r.top1[i].unwrap();
                    (r.rows[i], t.1, t.2)
                })
                .collect();
            levels.push((st.stride, level_set(st.stride, st.dims_a, st.dims_b, &list)));
        }
        for &s in &scales[levels.len()..] {
            levels.push((s, MatchSet::default()));
        }
        let level_counts = levels.iter().map(|(s, m)| (*s, m.len())).collect();
        let (stride, dims_a, dims_b, list) = mo.final_matches()?;
        let centre = |d: GridDims, i: usize| {
            let (r, c) = d.cell(i);
            [(c as f64 + 0.5) * stride as f64, (r as f64 + 0.5) * stride as f64]
        };
        let points: Vec<([f64; 2], [f64; 2])> = list.iter().map(|&(i, j, _)| (centre(dims_a, i), centre(dims_b, j))).collect();
        let mut timings = mo.timings.clone();
        let clock = Instant::now();
        let mut targets: Vec<[f64; 2]> = points.iter().map(|p| p.1).collect();
        if let Some((pairs, _, res)) = self.refine_points(&mo.feats, &ctx, &points)? {
            let rv = res.value();
            let s2 = refine::STRIDE as f64;
            let half_centre = |d: GridDims, i: usize| {
                let (r, c) = d.cell(i);
                [(c as f64 + 0.5) * s2, (r as f64 + 0.5) * s2]
            };
            let d2a = mo.feats.a.dims(refine::STRIDE)?;
            let d2b = mo.feats.b.dims(refine::STRIDE)?;
            for (m, &(ha, hb)) in pairs.iter().enumerate() {
                let (ca, cb) = (half_centre(d2a, ha), half_centre(d2b, hb));
                let delta = [points[m].0[0] - ca[0], points[m].0[1] - ca[1]];
                let r = rv.row(m);
                targets[m] = [cb[0] + s2 * r[0].as_f64() + delta[0], cb[1] + s2 * r[1].as_f64() + delta[1]];
            }
            timings.push(StageTiming { name: "refinement".into(), ms: clock.elapsed().as_secs_f64() * 1e3 });
        }
        let scale = 1.0 / stride as f64;
        let mut entries = Vec::with_capacity(list.len());
        for (m, &(_, _, conf)) in list.iter().enumerate() {
            let (p, q) = (points[m].0, targets[m]);
            if inside(p, a) && inside(q, b) {
                entries.push(Match { xa: p[0], ya: p[1], xb: q[0], yb: q[1], conf: conf.clamp(0.0, 1.0), scale });
            }
        }
        let matches = MatchSet::new(entries);
        let confidence = ConfidenceMap::from_matches(dims_a, stride, &matches);
        timings.push(StageTiming { name: "total".into(), ms: total.elapsed().as_secs_f64() * 1e3 });
        Ok(PipelineOut { matches, confidence, level_counts, levels, timings })
    }
}

fn select_parents(mut rows: Vec<(usize, usize)>, policy: &SpawnPolicy<'_>, stride: usize) -> Vec<(usize, usize)> {
    if let SpawnPolicy::Train { eligible, cap, seed } = policy {
        rows.retain(|r| eligible(stride, r.0));
        if rows.len() > *cap {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (stride as u64).wrapping_mul(0x9e37_79b9));
            rows.shuffle(&mut rng);
            rows.truncate(*cap);
        }
        rows.sort_unstable();
    }
    rows
}

/// Distinct targets of `(source, target)` pairs with the first source
/// that chose each.
fn unique_targets(rows: &[(usize, usize)]) -> (Vec<usize>, Vec<usize>) {
    let mut seen = std::collections::HashSet::new();
    let mut b = Vec::new();
    let mut partner = Vec::new();
    for &(i, j) in rows {
        if seen.insert(j) {
            b.push(j);
            partner.push(i);
        }
    }
    (b, partner)
}
