//! Command line front end: experiment runs, sweeps, property checks and
//! stream generation.

pub mod config;
pub mod error;
pub mod files;
pub mod props;
pub mod run;
pub mod streams_cmd;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
