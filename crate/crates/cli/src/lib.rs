//! Experiment orchestration for the federated active learning simulator:
//! configuration, multi-seed runs, strategy comparison, typicality shift
//! analysis and plot-data emission.

pub mod commands;
pub mod config;
pub mod error;
pub mod results;

pub use error::{CliError, CliResult};
