//! Higher-order recurrent space-time attention for sequence prediction.
//!
//! The crate is self-contained: a small reverse-mode differentiation engine
//! ([`graph`]), the recurrent attention layer ([`layer`]), a stacked sequence
//! classifier ([`network`]), a synthetic moving-shape video generator
//! ([`data`]), training and metrics ([`train`], [`metrics`]), and cost
//! accounting and attention export ([`cost`], [`export`]).

pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod graph;
pub mod layer;
pub mod metrics;
pub mod network;
pub mod preset;
pub mod tensor;
pub mod train;

pub use error::{HorstError, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
