//! Command-line driver: run configs, checkpoints and experiment commands.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use commands::{run, CliError};
pub use config::{ConfigError, RunConfig};
