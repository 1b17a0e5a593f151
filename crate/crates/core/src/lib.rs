//! Confidence-based out-of-distribution detection test-bed: small MLP
//! classifiers on synthetic or tabular data, post-hoc and training-time
//! OOD scores, and the metrics used to compare them.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod scores;

pub use error::{Error, Result};
