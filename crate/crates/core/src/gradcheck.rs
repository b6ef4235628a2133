//! Finite-difference verification of analytic gradients (float64 only).

use std::fmt;

use crate::autograd::{Tape, Var};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::Tensor;

/// Result for one input tensor.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct GradEntry {
    pub name: String,
    pub numel: usize,
    /// `max|analytic − numeric| / max(max|numeric|, max|analytic|)`.
    pub rel_err: f64,
    pub abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct GradReport {
    pub tol: f64,
    pub step: f64,
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> Vec<&GradEntry> {
        self.entries.iter().filter(|e| !e.passed).collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradient check (step {:e}, tol {:e})", self.step, self.tol)?;
        for e in &self.entries {
            writeln!(
                f,
                "  {:<32} n={:<6} rel={:.3e} abs={:.3e} {}",
                e.name,
                e.numel,
                e.rel_err,
                e.abs_err,
                if e.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn compare(name: &str, analytic: &Tensor<f64>, numeric: &Tensor<f64>, tol: f64) -> GradEntry {
    let abs_err = analytic.max_abs_diff(numeric);
    let scale = numeric.max_abs().max(analytic.max_abs());
    let rel_err = if abs_err == 0.0 { 0.0 } else { abs_err / scale.max(1e-12) };
    GradEntry {
        name: name.to_string(),
        numel: analytic.len(),
        rel_err,
        abs_err,
        passed: rel_err <= tol,
    }
}

/// Checks `d f / d inputs` for a scalar-valued `f`.
pub fn check_grads<F>(inputs: &[(String, Tensor<f64>)], f: F, step: f64, tol: f64) -> GradReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let tape = Tape::no_grad();
        let vars: Vec<_> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|(_, t)| tape.input(t.clone())).collect();
        let out = f(&tape, &vars);
        let g = tape.backward(out);
        vars.iter()
            .zip(inputs)
            .map(|(v, (_, t))| g.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };
    let mut vals: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut entries = Vec::new();
    for (i, (name, t)) in inputs.iter().enumerate() {
        let mut num = Tensor::zeros(t.shape());
        for e in 0..t.len() {
            let x0 = vals[i].data()[e];
            vals[i].data_mut()[e] = x0 + step;
            let fp = eval(&vals);
            vals[i].data_mut()[e] = x0 - step;
            let fm = eval(&vals);
            vals[i].data_mut()[e] = x0;
            num.data_mut()[e] = (fp - fm) / (2.0 * step);
        }
        entries.push(compare(name, &analytic[i], &num, tol));
    }
    GradReport { tol, step, entries }
}

/// Checks gradients of a model loss w.r.t. the listed parameters. Frozen
/// parameters must receive an analytic gradient of exactly zero; their entry
/// passes only when the numeric gradient is also treated as irrelevant, so
/// callers check frozen tensors with [`frozen_grad_is_zero`].
pub fn check_param_grads<F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    f: F,
    step: f64,
    tol: f64,
) -> GradReport
where
    F: for<'t> Fn(&Ctx<'t, f64>) -> Var<'t, f64>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let out = f(&ctx);
        let g = tape.backward(out);
        ids.iter()
            .map(|&id| {
                g.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).value().shape()))
            })
            .collect()
    };
    let eval = |s: &ParamStore<f64>| -> f64 {
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, s);
        f(&ctx).item()
    };
    let mut entries = Vec::new();
    for (k, &id) in ids.iter().enumerate() {
        let n = store.get(id).value().len();
        let mut num = Tensor::zeros(store.get(id).value().shape());
        for e in 0..n {
            let x0 = store.get(id).value().data()[e];
            store.update(id, |t| t.data_mut()[e] = x0 + step);
            let fp = eval(store);
            store.update(id, |t| t.data_mut()[e] = x0 - step);
            let fm = eval(store);
            store.update(id, |t| t.data_mut()[e] = x0);
            num.data_mut()[e] = (fp - fm) / (2.0 * step);
        }
        let name = store.get(id).name().to_string();
        entries.push(compare(&name, &analytic[k], &num, tol));
    }
    GradReport { tol, step, entries }
}

/// True when the tape produced no gradient at all for every listed parameter.
pub fn frozen_grad_is_zero<F>(store: &ParamStore<f64>, ids: &[ParamId], f: F) -> bool
where
    F: for<'t> Fn(&Ctx<'t, f64>) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let out = f(&ctx);
    let g = tape.backward(out);
    ids.iter()
        .all(|&id| g.param(id).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)))
}
