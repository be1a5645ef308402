//! Experiment drivers behind the `plateau-dyn` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, Result};
