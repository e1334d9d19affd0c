//! Dense f64 tensors with a recorded tape and reverse-mode differentiation.
//!
//! A [`Graph`] is built per forward pass. Trainable state lives in a
//! [`ParamStore`]; [`Graph::param`] binds a stored tensor as a leaf and
//! [`Graph::backward`] returns gradients keyed by [`ParamId`].

mod backward;
pub mod catalog;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
pub mod rng;
pub mod shape;
mod tensor;

pub use backward::Gradients;
pub use catalog::{Attrs, OpKind};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, FdOptions, FdReport};
pub use graph::{Graph, ReduceKind, Var};
pub use params::{Param, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
