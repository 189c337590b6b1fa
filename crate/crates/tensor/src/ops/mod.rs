//! Differentiable primitives, implemented as methods on [`crate::Tensor`].
//!
//! Each submodule pairs a forward computation with its backward record.

mod binary;
mod linalg;
mod loss;
mod nn;
mod reduce;
mod shape;
mod unary;

pub use nn::GELU_TANH_COEF;

use crate::float::Float;
use crate::tensor::Tensor;

/// Forward-declares a backward struct holding its inputs plus saved state.
macro_rules! grad_fn {
    ($name:ident { $($field:ident : $ty:ty),* $(,)? }) => {
        pub(crate) struct $name<F: crate::Float> {
            pub(crate) inputs: Vec<crate::Tensor<F>>,
            $(pub(crate) $field: $ty,)*
        }
    };
}
pub(crate) use grad_fn;

pub(crate) fn needs<F: Float>(inputs: &[Tensor<F>], i: usize) -> bool {
    inputs[i].requires_grad()
}
