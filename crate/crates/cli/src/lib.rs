//! Experiment runner library: configuration resolution, training runs and
//! grid sweeps, metrics plotting, and contraction-bound verification. The
//! `specfed` binary is a thin wrapper over these modules.

pub mod config;
pub mod experiment;
pub mod plot;
pub mod theory_cmd;

pub use config::{CliError, ExperimentConfig, KeyValues, Profile, Result};
