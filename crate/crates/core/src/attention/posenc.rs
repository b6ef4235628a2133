use super::GridDims;
use crate::{Scalar, Tensor};

/// Whether grid positions are used as-is or rescaled to the training grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PeMode {
    Train,
    /// Grid extent seen during training, in cells at the same scale.
    Infer { train: GridDims },
}

/// 2-D sinusoidal encoding `[h·w, c]`. Channel groups of four hold
/// `sin(x·ω), cos(x·ω), sin(y·ω), cos(y·ω)` with `ω_i = 10000^(−2i/(c/2))`.
/// In infer mode positions are scaled by `train / test` per axis.
pub fn sinusoid<T: Scalar>(dims: GridDims, c: usize, mode: PeMode) -> Tensor<T> {
    assert!(c % 4 == 0, "positional channels must be a multiple of 4");
    let (sy, sx) = match mode {
        PeMode::Train => (1.0, 1.0),
        PeMode::Infer { train } => (train.h as f64 / dims.h as f64, train.w as f64 / dims.w as f64),
    };
    let groups = c / 4;
    let freqs: Vec<f64> = (0..groups)
        .map(|i| (-(10000f64.ln()) * (2 * i) as f64 / (c / 2) as f64).exp())
        .collect();
    let mut out = Vec::with_capacity(dims.len() * c);
    for r in 0..dims.h {
        for col in 0..dims.w {
            let (y, x) = (r as f64 * sy, col as f64 * sx);
            for &f in &freqs {
                out.push(T::of((x * f).sin()));
                out.push(T::of((x * f).cos()));
                out.push(T::of((y * f).sin()));
                out.push(T::of((y * f).cos()));
            }
        }
    }
    Tensor::from_vec(&[dims.len(), c], out)
}
