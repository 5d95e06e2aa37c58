//! Multiple-aggregation temporal pyramids for variable-length sequence
//! classification.
//!
//! The crate provides:
//!
//! - [`pyramid`]: the binary temporal hierarchy, per-node mean descriptors,
//!   and the two aggregation variants (weighted concatenation / averaging);
//! - [`simplex`]: simplex-constrained node and fusion weights via the exp
//!   reparametrization, with the analytic Jacobian pullback;
//! - [`schedule`]: the periodic frame scheduler that spreads gradient work
//!   over epochs;
//! - [`kernel`], [`svm`], [`mkl`]: the shallow path — per-node Gram
//!   matrices, their simplex-weighted combinations, an SMO max-margin
//!   solver, and the alternating kernel-weight optimization;
//! - [`deep`]: the end-to-end path — a small framewise encoder, pyramid
//!   aggregation, batch-norm + linear + softmax heads, learnable two-stream
//!   fusion, and hand-derived backward passes for all of it;
//! - [`data`]: feature-file and manifest I/O plus a synthetic two-stream
//!   generator with controllable temporal granularity;
//! - [`gradcheck`]: finite-difference verification for every backward pass.

pub mod data;
pub mod deep;
pub mod error;
pub mod gradcheck;
pub mod kernel;
pub mod mkl;
pub mod pyramid;
pub mod schedule;
pub mod simplex;
pub mod svm;

pub use error::{Error, Result};
