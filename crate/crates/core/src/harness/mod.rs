//! Declarative Monte Carlo experiments.
//!
//! A JSON [`ExperimentConfig`] describes the scenario, the modality and σ
//! grid, the estimators and the trial count. [`run_experiment`] evaluates
//! every `(estimator, σ, trial)` cell in parallel and [`emit_outputs`] writes
//! `trials.csv`, `summary.json` and `plotdata/<estimator>.csv`.
//!
//! Trial `i` of estimator `e` at σ index `s` draws its observations from seed
//! `derive_seed(master_seed, [hash_str(e), s, i])` (the estimator term is `0`
//! with `paired_noise`), and body `b` within the trial from
//! `derive_seed(trial_seed, [b])`. Any single trial can be replayed from
//! those two formulas.

mod config;
mod output;
mod run;
pub mod stats;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{
    BodyConfig, ExperimentConfig, GprConfig, NoiseGrid, OutputConfig, PoseSpread, Scenario,
    SolverConfig, ESTIMATORS, SCHEMA_VERSION,
};
pub use output::{
    emit_outputs, fmt_f64, plotdata_csv, summary_json, trials_csv, OutputPaths, PLOT_HEADER,
    TRIALS_HEADER,
};
pub use run::{
    crlb_overlay, crlb_table, rotation_error, run_experiment, summarize_trials, trial_poses,
    trial_seed, CellSummary, CrlbOverlay, CrlbRow, ExperimentOutput, Summary, TrialResult,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Runtime(String),
}
