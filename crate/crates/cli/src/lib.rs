//! Command-line front end: run configuration, artifact directories and
//! experiment drivers.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
