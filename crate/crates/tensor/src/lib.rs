//! Dense row-major tensors with a reverse-mode autodiff graph.
//!
//! Every operation returns a fresh [`Tensor`]; when any operand tracks
//! gradients the result records a [`GradFn`] pointing back at its operands.
//! Calling [`Tensor::backward`] on a scalar walks that graph once in reverse
//! topological order and accumulates gradients into the tracked leaves.
//!
//! The element type is generic over [`Float`]: training runs in `f32`,
//! gradient checks switch to `f64`.

mod error;
mod float;
mod kernels;
mod tensor;

pub mod gradcheck;
pub mod init;
pub mod ops;

pub use error::{Result, TensorError};
pub use float::{DType, Float};
pub use gradcheck::{gradcheck, GradCheckReport};
pub use tensor::{is_grad_enabled, no_grad, GradFn, Tensor};
