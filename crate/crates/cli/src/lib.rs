//! Command-line pipeline: prepare data, train, evaluate, gradient-check and
//! run ablation grids, all driven by one flat configuration file.

pub mod commands;
pub mod config;
pub mod error;
pub mod variants;

pub use config::RunConfig;
pub use error::{CliError, Result};
