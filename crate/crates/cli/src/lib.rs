//! Command-line orchestration of the HeadRank phases: configuration,
//! checksummed artifact directories and static reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod reports;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
