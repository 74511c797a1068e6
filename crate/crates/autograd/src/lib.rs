//! Minimal reverse-mode automatic differentiation over dense `f64` tensors,
//! with finite-difference gradient checking.
//!
//! The op set is deliberately small: it covers what a causal self-attention
//! recommender needs (matmul, broadcasting add/mul, concat, embedding lookup,
//! layer norm, relu, masked softmax, sigmoid, log, reductions). Every forward
//! op rejects non-finite outputs.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{log_sigmoid, Gradients, Graph, OpKind, Var};
pub use tensor::{ParamId, ParamStore, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("zero vector in {op}")]
    ZeroVector { op: &'static str },
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}
