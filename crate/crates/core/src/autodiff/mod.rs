//! Reverse-mode differentiation over the ops needed by the variational loss
//! and the amortized network: elementwise arithmetic, reductions, the
//! Laplacian quadratic form, resampling (warp and composition), convolution,
//! LeakyReLU, nearest upsampling and channel concatenation.

pub mod conv;
mod tape;

pub use conv::{conv_backward, conv_forward, ConvGeom};
pub use tape::{Gradients, Tape, Tensor, Var};
