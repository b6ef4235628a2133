//! Cascaded transformer image matching.
//!
//! Coarse dual-softmax matching at 1/8 resolution, candidate-restricted
//! cascade attention at 1/4 and 1/2, soft-argmax sub-pixel refinement and
//! confidence-map NMS detection, with a synthetic-data training loop and
//! homography / relative-pose evaluation.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for training and
//! inference, `f64` for gradient checks).

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod detect;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod gradcheck;
pub mod imageio;
pub mod matcher;
pub mod nn;
pub mod refine;
pub mod training;
mod scalar;
mod tensor;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
