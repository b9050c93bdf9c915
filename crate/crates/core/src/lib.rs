//! Margin-discrepancy adversarial training for multi-domain text
//! classification, with divergence oracles and a generalization-bound
//! evaluator.

pub mod bound;
pub mod dataio;
pub mod error;
pub mod margin;
pub mod model;
pub mod numkernel;
pub mod train;

pub use error::{Error, Result};
