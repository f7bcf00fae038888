//! Command-line front end: run configuration, subcommands and exit codes.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{ModelSelection, RunLock};
pub use config::{load_config, CheckpointChoice, RunConfig};
pub use error::CliError;
