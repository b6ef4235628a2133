//! Parameters and the small set of layers every network module is built from.

mod layers;
mod params;

pub use layers::{Conv, Ctx, DepthwiseConv, Ffn, LayerNorm, Linear, ResBlock};
pub use params::{Param, ParamId, ParamStore};
