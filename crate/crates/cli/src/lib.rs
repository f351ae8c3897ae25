//! Command-line harness for the vhrnn toolkit: synthetic data generation,
//! training with checkpoints, evaluation, the generalization battery and
//! diagnostic traces.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run, Cli, Command};
pub use error::{CliError, Result};
