//! Command implementations behind the `benthos` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod layout;

pub use commands::Context;
pub use config::ExperimentConfig;
pub use error::CliError;
