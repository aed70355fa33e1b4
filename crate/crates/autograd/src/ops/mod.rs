//! Differentiable operations, implemented as methods on [`Var`](crate::Var).

mod conv;
mod elementwise;
pub(crate) mod linalg;
mod norm;
mod shape;

pub use conv::{conv_out_size, conv_transpose_out_size};
pub use elementwise::{gelu, sigmoid, softplus};
pub use shape::concat;
