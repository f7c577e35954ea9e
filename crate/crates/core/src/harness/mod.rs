//! Configuration, experiment orchestration and the acceptance checks.

pub mod config;
pub mod runner;
pub mod verify;

pub use config::{validate_config, ExperimentConfig, SweepAxis};
pub use runner::{run_experiment, run_single, topology_report, RunResult, THREADS_ENV};
pub use verify::{verify_suite, CriterionReport};
