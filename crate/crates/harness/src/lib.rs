//! Command-line harness: configuration, synthetic data, training,
//! evaluation, checkpoints and mode-map export.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod export;
pub mod optim;
pub mod train;

pub use error::{HarnessError, Result};
