#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Budgeted matrix completion when two kinds of observation are for sale:
//! cheap, noisy full columns and expensive, accurate single entries.

pub mod baselines;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod ncur;
pub mod observation;
pub mod rng;
pub mod sketch;
pub mod theory;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
