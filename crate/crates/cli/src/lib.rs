//! Experiment driver for k-space registration of multi-echo acquisitions.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

pub use config::{default_config, ExperimentConfig, Method};
pub use error::CliError;
pub use experiment::{ArmResult, ComparisonReport, Experiment};
