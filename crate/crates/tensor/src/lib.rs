//! Dense `f64` tensors and a single-use reverse-mode tape.
//!
//! The tape records a small set of operations (matmul, add, scale, embedding
//! lookup, RMSNorm, softmax, GELU, causal attention, cross-entropy, plus a few
//! reductions) and replays them backwards once. Row-wise kernels are exposed
//! in [`kernels`] so incremental decoding can reuse the exact arithmetic of
//! the tape forward.

// `!(x > 0.0)` also rejects NaN, which is the point of those checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_check, op_gradient_suite};
pub use tape::{Gradients, OpAttrs, OpKind, Tape, Var, DEFAULT_RMS_EPS};
pub use tensor::Tensor;
