use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{classification_loss, refine_loss};
use super::optim::Adam;
use super::supervision::{build_supervision, coarse_supervision, refine_targets};
use super::{Stage, StagePlan, TrainConfig};
use crate::attention::GridDims;
use crate::autograd::{Tape, Var};
use crate::error::{invalid, Result};
use crate::geometry::synth::{gt_correspondence, GtField, SyntheticPair};
use crate::matcher::{Model, SpawnPolicy};
use crate::nn::{Ctx, ParamStore};
use crate::{refine, Tensor};

/// One training pair with its ground truth at every stride.
pub struct TrainSample {
    pub a: Tensor<f32>,
    pub b: Tensor<f32>,
    pub size: (usize, usize),
    pub gt: BTreeMap<usize, GtField>,
}

impl TrainSample {
    pub fn new(pair: &SyntheticPair, strides: &[usize]) -> Result<Self> {
        let mut gt = BTreeMap::new();
        for &s in strides {
            gt.insert(s, gt_correspondence(pair, s)?);
        }
        Ok(Self { a: pair.image_a.to_tensor(), b: pair.image_b.to_tensor(), size: pair.size(), gt })
    }

    fn gt(&self, stride: usize) -> Result<&GtField> {
        self.gt.get(&stride).ok_or_else(|| invalid!("no ground truth at stride {stride}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleLoss {
    pub stride: usize,
    pub loss: f64,
    pub supervised: usize,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: usize,
    pub global_step: usize,
    pub pair: usize,
    pub lr: f64,
    pub loss: f64,
    pub coarse: ScaleLoss,
    pub cascade: Vec<ScaleLoss>,
    pub refine: Option<ScaleLoss>,
    pub grad_norm: f64,
}

impl StepRecord {
    /// Sum of the cascade terms (0 without cascade stages).
    pub fn cascade_loss(&self) -> f64 {
        self.cascade.iter().map(|s| s.loss).sum()
    }
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, &v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

pub struct Trainer<'a> {
    pub model: &'a Model,
    pub store: ParamStore<f32>,
    pub cfg: TrainConfig,
    samples: &'a [TrainSample],
    optimizer: Option<Adam<f32>>,
    global_step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Model, store: ParamStore<f32>, cfg: TrainConfig, samples: &'a [TrainSample]) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(invalid!("training corpus is empty"));
        }
        if cfg.schedule.iter().any(|p| p.stage == Stage::Pmt) && model.ladder.is_none() {
            return Err(invalid!("pmt training needs a model with model.ladder = true"));
        }
        let need = model.cfg.matcher.scales.len();
        if let Some(p) = cfg.schedule.iter().find(|p| p.stage.levels() > need) {
            return Err(invalid!("stage {} needs {} scales, the model has {need}", p.stage.label(), p.stage.levels()));
        }
        Ok(Self { model, store, cfg, samples, optimizer: None, global_step: 0 })
    }

    pub fn optimizer(&self) -> Option<&Adam<f32>> {
        self.optimizer.as_ref()
    }

    /// Sets the trainable subset for a stage and starts a fresh optimizer.
    pub fn begin_stage(&mut self, stage: Stage) {
        self.store.set_all_trainable(true);
        if stage == Stage::Pmt {
            for p in Model::frozen_prefixes() {
                self.store.set_trainable_prefix(p, false);
            }
        }
        self.optimizer = Some(Adam::new(self.cfg.optimizer.clone()));
    }

    /// Runs the whole schedule, reporting every step (and the updated
    /// parameters) to `log`.
    pub fn run(&mut self, log: &mut dyn FnMut(&StepRecord, &ParamStore<f32>) -> Result<()>) -> Result<()> {
        for plan in self.cfg.schedule.clone() {
            self.run_stage(&plan, log)?;
        }
        Ok(())
    }

    pub fn run_stage(
        &mut self,
        plan: &StagePlan,
        log: &mut dyn FnMut(&StepRecord, &ParamStore<f32>) -> Result<()>,
    ) -> Result<()> {
        self.begin_stage(plan.stage);
        let n = self.samples.len();
        let mut order: Vec<usize> = Vec::new();
        for step in 0..plan.steps {
            if step % n == 0 {
                let epoch = (step / n) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (plan.stage as u64) << 32 ^ epoch);
                order = (0..n).collect();
                order.shuffle(&mut rng);
            }
            let pair = order[step % n];
            let rec = self.step(plan.stage, step, plan.steps, pair)?;
            log(&rec, &self.store)?;
        }
        Ok(())
    }

    /// One optimizer step on sample `pair`.
    pub fn step(&mut self, stage: Stage, step: usize, total: usize, pair: usize) -> Result<StepRecord> {
        if self.optimizer.is_none() {
            self.begin_stage(stage);
        }
        let sample = &self.samples[pair];
        let scales = &self.model.cfg.matcher.scales[..stage.levels()];
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let (loss, mut rec) = self.losses(&ctx, sample, scales, stage, step)?;
        let grads = tape.backward(loss);
        let lr = self.cfg.optimizer.lr_at(step, total);
        let opt = self.optimizer.as_mut().unwrap();
        rec.grad_norm = opt.step(&mut self.store, &grads, lr);
        rec.lr = lr;
        rec.pair = pair;
        rec.global_step = self.global_step;
        self.global_step += 1;
        if !rec.loss.is_finite() {
            return Err(crate::Error::Runtime(format!("non-finite loss at step {step} of {}", stage.label())));
        }
        Ok(rec)
    }

    /// Total loss of one sample and its breakdown.
    pub fn losses<'t>(
        &self,
        ctx: &Ctx<'t, f32>,
        sample: &TrainSample,
        scales: &[usize],
        stage: Stage,
        step: usize,
    ) -> Result<(Var<'t, f32>, StepRecord)> {
        let tape = ctx.tape;
        let eligible = |stride: usize, cell: usize| {
            sample.gt.get(&stride).is_some_and(|g| g.valid[cell] && in_frame(g.target[cell], sample.size))
        };
        let seed = self.cfg.seed ^ ((self.global_step as u64) << 20) ^ step as u64;
        let policy = SpawnPolicy::Train { eligible: &eligible, cap: self.model.cfg.matcher.train_parents, seed };
        let mo = self.model.forward_matching(ctx, tape.constant(sample.a.clone()), tape.constant(sample.b.clone()), scales, &policy)?;
        let (kind, gamma, w) = (self.cfg.loss, self.cfg.gamma, &self.cfg.weights);

        let gt0 = sample.gt(mo.coarse_stride)?;
        let sup0 = coarse_supervision(gt0, mo.coarse.dims_b);
        let l0 = classification_loss(mo.coarse_prob, &sup0.entries, kind, gamma);
        let mut total = l0.scale(w.coarse as f32);
        let coarse = ScaleLoss { stride: mo.coarse_stride, loss: l0.item() as f64, supervised: sup0.len() };

        let mut cascade = Vec::new();
        for st in &mo.stages {
            let gt = sample.gt(st.stride)?;
            let sup = build_supervision(&st.result.rows, &st.result.cand, gt, st.dims_b);
            let l = classification_loss(st.prob, &sup.entries, kind, gamma);
            total = total.add(l.scale(w.cascade as f32));
            cascade.push(ScaleLoss { stride: st.stride, loss: l.item() as f64, supervised: sup.len() });
        }

        let mut refine_rec = None;
        if let Some(last) = mo.stages.last().filter(|s| s.stride == refine::STRIDE) {
            let gt = sample.gt(last.stride)?;
            let r = &last.result;
            let centre = |d: GridDims, i: usize| {
                let (y, x) = d.cell(i);
                [(x as f64 + 0.5) * last.stride as f64, (y as f64 + 0.5) * last.stride as f64]
            };
            let mut points = Vec::new();
            let mut truth = Vec::new();
            for (q, t) in r.top1.iter().enumerate() {
                let Some(t) = t else { continue };
                let cell = r.rows[q];
                if !eligible(last.stride, cell) {
                    continue;
                }
                points.push((centre(last.dims_a, cell), centre(last.dims_b, t.1)));
                truth.push(Some(gt.target[cell]));
            }
            if let Some((pairs, _, res)) = self.model.refine_points(&mo.feats, ctx, &points)? {
                let da = mo.feats.a.dims(refine::STRIDE)?;
                let db = mo.feats.b.dims(refine::STRIDE)?;
                let (rows, target) = refine_targets(&points, &pairs, &truth, da, db);
                let l = refine_loss(res, &rows, &target);
                total = total.add(l.scale(w.refine as f32));
                refine_rec = Some(ScaleLoss { stride: refine::STRIDE, loss: l.item() as f64, supervised: rows.len() });
            }
        }
        let rec = StepRecord {
            stage,
            step,
            global_step: 0,
            pair: 0,
            lr: 0.0,
            loss: total.item() as f64,
            coarse,
            cascade,
            refine: refine_rec,
            grad_norm: 0.0,
        };
        Ok((total, rec))
    }
}

fn in_frame(q: [f64; 2], size: (usize, usize)) -> bool {
    q[0] >= 0.0 && q[1] >= 0.0 && q[0] < size.0 as f64 && q[1] < size.1 as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionConfig;
    use crate::geometry::synth::{homography_pair, ProceduralTexture};
    use crate::geometry::HomographyBounds;
    use crate::matcher::ModelConfig;
    use crate::training::StagePlan;

    fn setup(ladder: bool) -> (Model, ParamStore<f32>, Vec<TrainSample>) {
        let mut cfg = ModelConfig::default();
        cfg.encoder.channels = vec![8, 16, 16];
        cfg.matcher.coarse_blocks = 2;
        cfg.matcher.train_parents = 16;
        cfg.ladder = ladder;
        let mut att = AttentionConfig::default();
        att.heads = 2;
        att.lw.window = 4;
        att.lw.k = 16;
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &cfg, &att, 3).unwrap();
        let samples = (0..2)
            .map(|s| {
                let tex = ProceduralTexture::new(s, 64, 64);
                let p = homography_pair(s, 64, 64, &HomographyBounds::default(), &tex).unwrap();
                TrainSample::new(&p, &[8, 4, 2]).unwrap()
            })
            .collect();
        (model, store, samples)
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn deterministic_records() {
        let (model, store, samples) = setup(false);
        let mut cfg = TrainConfig::default();
        cfg.schedule = vec![StagePlan { stage: Stage::CoarseOnly, steps: 2 }, StagePlan { stage: Stage::Cascade2c, steps: 2 }];
        let run = |store: ParamStore<f32>| {
            let mut t = Trainer::new(&model, store, cfg.clone(), &samples).unwrap();
            let mut recs = Vec::new();
            t.run(&mut |r, _| {
                recs.push(serde_json::to_string(r).unwrap());
                Ok(())
            })
            .unwrap();
            (recs, t.store.digest(&t.store.trainable_ids()))
        };
        let (a, da) = run(store.clone());
        let (b, db) = run(store);
        assert_eq!(a, b);
        assert_eq!(da, db);
        let last: StepRecord = serde_json::from_str(a.last().unwrap()).unwrap();
        assert_eq!(last.cascade.len(), 2);
        assert!(last.refine.is_some());
        assert!(last.loss >= 0.0);
    }

    #[test]
    fn pmt_freezes_encoder_and_coarse() {
        let (model, store, samples) = setup(true);
        let mut cfg = TrainConfig::default();
        cfg.schedule = vec![StagePlan { stage: Stage::Pmt, steps: 1 }];
        cfg.init = Some("memory".into());
        let frozen_names = |s: &ParamStore<f32>| {
            s.iter()
                .filter(|(_, p)| Model::frozen_prefixes().iter().any(|f| p.name().starts_with(f)))
                .map(|(id, _)| id)
                .collect::<Vec<_>>()
        };
        let ids = frozen_names(&store);
        let before = store.digest(&ids);
        let mut t = Trainer::new(&model, store, cfg, &samples).unwrap();
        t.run(&mut |_, _| Ok(())).unwrap();
        assert_eq!(t.store.digest(&ids), before);
        let state = t.optimizer().unwrap().state_ids();
        assert!(!state.is_empty());
        assert!(state.iter().all(|id| !ids.contains(id)));
    }

    #[test]
    fn pmt_requires_init_and_ladder() {
        let (model, store, samples) = setup(false);
        let mut cfg = TrainConfig::default();
        cfg.schedule = vec![StagePlan { stage: Stage::Pmt, steps: 1 }];
        assert!(Trainer::new(&model, store.clone(), cfg.clone(), &samples).is_err());
        cfg.init = Some("x".into());
        assert!(Trainer::new(&model, store, cfg, &samples).is_err());
    }
}
