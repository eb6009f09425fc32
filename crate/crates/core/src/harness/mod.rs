//! Experiment configuration, training runs, sweeps and validation suites.

pub mod config;
pub mod experiment;
pub mod validation;

pub use config::{AgentKind, ExperimentConfig};
pub use experiment::{run_experiment, run_sweep, Convergence, ExperimentResult, SweepResult};
pub use validation::{run_validation, ValidationOptions, ValidationReport};
