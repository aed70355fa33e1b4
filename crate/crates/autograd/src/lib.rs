//! Dense tensors and tape-based reverse-mode differentiation, generic over
//! the floating-point element type.
//!
//! ```
//! use crossmlp_autograd::{Graph, Tensor64};
//!
//! let g = Graph::new();
//! let x = g.variable(Tensor64::from_vec(&[2], vec![1.0, -2.0]).unwrap());
//! let y = x.square().sum();
//! let grads = g.backward(y);
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0]);
//! ```

mod error;
pub mod gradcheck;
mod graph;
pub mod ops;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{GradCheck, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::concat;
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, InitPolicy, ParamId, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
