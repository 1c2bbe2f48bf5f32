//! Experiment harness: configuration, checkpoints, evaluation runs, sweeps
//! and reports.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod report;

pub use error::{HarnessError, Result};
