//! Command-line experiment runner for the gated KAN forecaster.

pub mod config;
pub mod experiments;
pub mod report;

pub use config::{CliError, ExperimentConfig, Overrides, Result};
