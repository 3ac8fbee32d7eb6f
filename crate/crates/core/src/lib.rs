//! Federated autoencoder training and summary-statistics anomaly thresholds.

pub mod config;
pub mod data;
pub mod error;
pub mod error_stats;
pub mod federation;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod thresholds;
pub mod util;

pub use error::{Error, Result};
pub use ndarray;
