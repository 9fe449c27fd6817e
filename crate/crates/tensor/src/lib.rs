//! Dense tensors with a recording tape for reverse-mode differentiation.
//!
//! Values are row-major [`Tensor`]s. A [`Graph`] records every forward op along
//! with what its reverse pass needs; [`Graph::backward`] replays it once and
//! returns gradients keyed by parameter name. Everything is generic over
//! [`Real`] so the same model code runs in `f32` for training and `f64` for
//! finite-difference checks.

pub mod broadcast;
mod error;
pub mod gradcheck;
mod graph;
mod kind;
mod params;
mod real;
pub mod rng;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, check_param_gradients, grad_check, grad_check_chain, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use kind::{forward_op, OpAttrs, OpKind};
pub use params::ParamStore;
pub use real::{Precision, Real};
pub use rng::RandomKey;
pub use tensor::Tensor;
