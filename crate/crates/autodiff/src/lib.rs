//! Minimal reverse-mode automatic differentiation.
//!
//! Values live on a [`Graph`] (a Wengert tape) that records every operation in
//! insertion order. [`Graph::backward`] walks the tape once in reverse, hands
//! back a [`Gradients`] table and clears the tape. Trainable tensors are kept
//! outside the tape in a [`ParamStore`]; they are copied onto the tape with
//! [`Graph::param`] and receive their gradients through
//! [`ParamStore::accumulate`].

mod adam;
mod error;
pub mod gradcheck;
mod graph;
mod linalg;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use params::{ParamRef, ParamStore};
pub use tensor::Tensor;
