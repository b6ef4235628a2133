use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::gradcheck::check_grads;
use crate::Tensor;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 1.0, &mut rng)
}

/// Panics unless analytic input gradients of `f` match central differences.
pub fn check_input_grad<F>(inputs: &[Tensor<f64>], f: F, tol: f64)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let named: Vec<(String, Tensor<f64>)> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("input{i}"), t.clone()))
        .collect();
    let report = check_grads(&named, f, 1e-5, tol);
    assert!(report.passed(), "{report}");
}
