//! Minimal reverse-mode differentiable tensor engine.

pub mod gradcheck;
mod optim;
mod real;
mod tape;
mod tensor;

pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Epsilon inside [`Tape::layer_norm`] used throughout the network.
pub const LAYER_NORM_EPS: f64 = 1e-6;
