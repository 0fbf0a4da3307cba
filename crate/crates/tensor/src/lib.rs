//! Dense f32 tensors with tape-based reverse-mode automatic differentiation.
//!
//! The op set covers what a windowed-attention U-Net needs: broadcasting
//! arithmetic, batched matmul, layer norm, softmax, GELU/SiLU, and the
//! layout ops (permute, window partition, cyclic shift, pixel shuffle).
//! Gradients are first order only.

mod autograd;
mod error;
pub mod gradcheck;
pub mod io;
mod ops;
mod rng;
mod tensor;

pub use autograd::Gradients;
pub use error::{Result, TensorError};
pub use ops::{Activation, DEFAULT_LN_EPS};
pub use rng::{splitmix64, Rng, RNG_ALGORITHM};
pub use tensor::{grad_enabled, no_grad, Tensor};
