//! Reverse-mode differentiation over small dense arrays.
//!
//! Graphs are rebuilt for every forward pass. Parameters live in a
//! [`ParamStore`] that a [`Graph`] borrows; `Graph::backward` returns the
//! gradients instead of writing them, so independent graphs can share one
//! store.

mod error;
pub mod functional;
mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, GRAD_CHECK_FLOOR};
pub use graph::{attention_forward, gelu, Graph, Var, LN_EPS, NORM_FLOOR};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
