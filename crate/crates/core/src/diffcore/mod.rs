//! Minimal reverse-mode automatic differentiation over small dense f64 tensors.
//!
//! Define-by-run: a [`Tape`] records every primitive as it executes and
//! [`backward`](Tape::backward) replays it in reverse. Tapes are rebuilt per
//! rollout and confined to one thread; parallelism happens across disjoint
//! tapes.

mod check;
pub mod ops;
mod tape;


pub use check::check_gradient;
pub use ops::{
    add, concat, concat_cols, div, exp, gelu, layernorm, log, matmul, mean, mul, neg, offset,
    powf, reshape, scale, slice_cols, slice_rows, softmax_last, sqrt, square, stack_rows, sub,
    sum, tanh, transpose,
};
pub use tape::{DTensor, Gradients, HostTensor, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("inputs live on different tapes (op {0})")]
    TapeMismatch(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor is not attached to a live tape")]
    DeadTape,
    #[error("non-finite value at coordinate {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, DiffError>;
