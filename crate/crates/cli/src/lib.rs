//! Experiment runner: configuration, grid execution, result files and
//! comparisons. The `stta` binary is a thin front end over this crate.

pub mod compare;
pub mod config;
pub mod error;
pub mod records;
pub mod runner;

pub use error::{CliError, CliResult};
