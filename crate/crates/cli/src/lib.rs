//! Command-line front end: experiment configs, subcommands and sweeps.

pub mod commands;
pub mod config;
pub mod sweep;

pub use config::{DataSpec, ExperimentConfig};
