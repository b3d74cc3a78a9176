//! Experiment driver behind the `adgen` binary: manifest-backed experiment
//! directories, one command per pipeline stage and a multi-seed report.

pub mod commands;
pub mod error;
pub mod report;
pub mod store;

pub use commands::{CommonOptions, Outcome};
pub use error::{CliError, CliResult};
