//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Every op in [`ops`] computes its value eagerly. When an input requires
//! gradients, the output keeps the op and its inputs, and [`Tensor::backward`]
//! walks that graph once in reverse topological order.

mod conv;
pub mod io;
pub mod ops;
mod tensor;

pub use ops::LOG_FLOOR;
pub use tensor::{zero_grad, Tensor};
