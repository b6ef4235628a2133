use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{invalid, Result};
use crate::nn::{ParamId, ParamStore};
use crate::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    /// Final learning rate of the cosine decay, relative to `lr`.
    pub lr_final: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, lr_final: 0.1, warmup: 20, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip: 1.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.lr_final) {
            return Err(invalid!("optimizer lr must be positive and lr_final in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(invalid!("optimizer betas must lie in [0, 1) and eps be positive"));
        }
        if self.weight_decay < 0.0 || self.clip < 0.0 {
            return Err(invalid!("weight_decay and clip must be non-negative"));
        }
        Ok(())
    }

    /// Linear warmup, then cosine decay to `lr · lr_final` at `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = total.saturating_sub(self.warmup).max(1);
        let t = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let lo = self.lr * self.lr_final;
        lo + 0.5 * (self.lr - lo) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam(W). Moment buffers exist only for parameters that were trainable
/// when they first received a gradient.
pub struct Adam<T: Scalar> {
    pub cfg: AdamConfig,
    step: u64,
    state: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, state: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Parameters that own optimizer state.
    pub fn state_ids(&self) -> Vec<ParamId> {
        self.state.keys().copied().collect()
    }

    pub fn state_numel(&self) -> usize {
        self.state.values().map(|(m, v)| m.len() + v.len()).sum()
    }

    /// Applies one update with learning rate `lr`; returns the gradient norm
    /// before clipping.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> f64 {
        let ids: Vec<ParamId> = store.trainable_ids().into_iter().filter(|&id| grads.param(id).is_some()).collect();
        let norm = ids
            .iter()
            .map(|&id| grads.param(id).unwrap().data().iter().map(|g| g.as_f64().powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if self.cfg.clip > 0.0 && norm > self.cfg.clip { self.cfg.clip / norm } else { 1.0 };
        self.step += 1;
        let c = &self.cfg;
        let (b1, b2) = (c.beta1, c.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for id in ids {
            let g = grads.param(id).unwrap();
            let (m, v) = self.state.entry(id).or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let (wd, eps) = (c.weight_decay, c.eps);
            store.update(id, |w| {
                for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                    let g = g.as_f64() * clip;
                    let mf = b1 * m.as_f64() + (1.0 - b1) * g;
                    let vf = b2 * v.as_f64() + (1.0 - b2) * g * g;
                    *m = T::of(mf);
                    *v = T::of(vf);
                    let upd = lr * ((mf / bc1) / ((vf / bc2).sqrt() + eps) + wd * w.as_f64());
                    *w = T::of(w.as_f64() - upd);
                }
            });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn minimises_a_quadratic_and_skips_frozen() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::from_f64(&[2], &[3.0, -2.0]));
        let b = store.add("b", Tensor::from_f64(&[1], &[5.0]));
        store.set_trainable(b, false);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, warmup: 0, clip: 0.0, ..Default::default() });
        for _ in 0..300 {
            let tape = Tape::new();
            let l = tape.param(&store, a).square().sum().add(tape.param(&store, b).square().sum());
            let g = tape.backward(l);
            opt.step(&mut store, &g, 0.1);
        }
        assert!(store.get(a).value().max_abs() < 1e-2);
        assert_eq!(store.get(b).value().data(), &[5.0]);
        assert_eq!(opt.state_ids(), vec![a]);
    }

    #[test]
    fn schedule_shape() {
        let c = AdamConfig { lr: 1.0, lr_final: 0.1, warmup: 10, ..Default::default() };
        assert!((c.lr_at(0, 100) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(10, 100) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(100, 100) - 0.1).abs() < 1e-12);
        assert!(c.lr_at(50, 100) < 1.0 && c.lr_at(50, 100) > 0.1);
    }
}
