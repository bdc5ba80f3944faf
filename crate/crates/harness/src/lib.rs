//! Experiment harness for the `loracomp` engine: TOML configs, sampling
//! experiments, moment metrics and hashed run artifacts.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod metrics;

pub use config::{ExperimentConfig, ExperimentKind, Testbed};
pub use error::HarnessError;
pub use experiments::{run_experiment, RunOptions, RunReport};
pub use metrics::{moment_metrics, MomentMetrics};
