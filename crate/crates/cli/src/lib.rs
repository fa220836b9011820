//! Configuration, orchestration and artifact output for the `stochflow` command.

pub mod config;
pub mod output;
pub mod run;
pub mod validate;

pub use config::{config_hash, load_config, parse_config, Experiment, ExperimentConfig};
pub use run::{run, Outcome, RunManifest, RunOptions, RunResult};
pub use validate::{validate, Status, ValidationReport};
