//! Experiment runner: configuration files, benchmark tasks, the results
//! store and reports.

pub mod config;
pub mod report;
pub mod run;
pub mod store;
pub mod tasks;

pub use config::{Algorithm, ConfigError, ExperimentConfig, Metric, TaskId};
pub use run::{cmd_reference, cmd_run, cmd_sbc, cmd_simulate, RunError, RunOutcome};
pub use store::{read_rows, ResultsStore, RunManifest, StoreError};
pub use tasks::{Fidelity, Observation, Task};
