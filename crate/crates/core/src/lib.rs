//! Estimators that combine a randomized trial with observational
//! ("real-world") data, plus the simulation harness used to compare them.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checks;
pub mod config;
pub mod error;
pub mod estimate;
pub mod fusion;
pub mod linalg;
pub mod nuisance;
pub mod synthgen;

pub use error::{Error, Result};
