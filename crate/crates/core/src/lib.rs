//! Early-exit transformer training under simulated 1F1B pipeline
//! parallelism, with KV-cache-compatible early-exit inference.

// `!(x > 0.0)` also rejects NaN, which is the point of those checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod infer;
pub mod model;
pub mod pipeline;
pub mod schedule;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
