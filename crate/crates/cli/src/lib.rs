//! Experiment harness: TOML configs, training runs, checkpoint evaluation
//! and parameter sweeps.

pub mod config;
pub mod error;
pub mod run;

pub use config::{Algorithm, ExperimentConfig, SweepSpec};
pub use error::CliError;
