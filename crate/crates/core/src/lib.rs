//! Long-term fairness toolkit.
//!
//! Simulates sequential decision data from a temporal structural causal model,
//! trains a recurrent conditional GAN on it, and trains decision policies that
//! trade off long-term fairness, local fairness and utility.

// Validation is written as `!(x > 0.0)` so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod metrics;

pub use error::{Error, Result};
pub mod models;
pub mod seeds;
pub mod simulator;
pub mod training;
