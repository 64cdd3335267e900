//! IO, dataset handling, training orchestration, evaluation and
//! listening-test statistics on top of `redry-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod moslab;
pub mod render;
pub mod runrecord;
pub mod train;
mod error;
pub mod evaluate;
pub mod infer;
pub mod wav;

pub use error::{exit_code, Error, Result};

/// Toolkit version recorded in checkpoints, reports and run records.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
