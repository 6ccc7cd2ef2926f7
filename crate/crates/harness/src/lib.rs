//! Experiment harness: task files, multi-trial runs, run records and
//! cross-task ranking.

pub mod config;
pub mod experiment;
pub mod records;
pub mod report;
pub mod task;

pub use config::{Experiment, ExperimentConfig, MethodSpec};
pub use experiment::{run_experiment, CandidateRow, ExperimentOutput, StepRow, Summary};
pub use task::{Task, TaskEntry, TaskSpec};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "BIB_OUTPUT_DIR";
/// Output directory used when neither a flag, the config nor the
/// environment names one.
pub const DEFAULT_OUTPUT_DIR: &str = "bib-output";
