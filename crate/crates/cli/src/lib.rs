//! Command-line harness: dataset generation, training, evaluation, sweeps
//! and gradient checks.

pub mod commands;
pub mod config;
pub mod error;
pub mod sweep;

pub use commands::{run, Cli};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
