//! Dense tensors and a tape-based reverse-mode differentiator, just large
//! enough to express and train the detector.

pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use kernels::{Activation, ELU_ALPHA, LEAKY_SLOPE};
pub use tape::{binary_cross_entropy, Gradients, Tape, Var, CLAMP_EPS};
pub use tensor::Tensor;

/// Layer-normalization epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;
