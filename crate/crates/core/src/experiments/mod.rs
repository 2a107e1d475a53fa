//! Experiment configuration, baseline policies, and run directories.
//!
//! A run directory holds `config.toml` (the effective configuration),
//! `metrics.csv`, `steps.jsonl` (one batch step per line) and
//! `summary.txt`. All are byte-deterministic for a given config.

mod config;
mod runner;

use thiserror::Error;

pub use config::{
    ExperimentConfig, PolicySpec, SlotSeeding, WorkloadSpec, DEFAULT_BASE_MAX_K, DEFAULT_SWEEP,
};
pub use runner::{
    build_batch, compare_policies, compare_report, comparison_csv, correlate, correlation_csv,
    execute, metrics_csv, parse_step_log, replay, run_experiment, scaling, step_log, sweep,
    sweep_csv, ComparedRun, ComparisonRow, CorrelateOutcome, RunOutput, SweepOutcome, CONFIG_FILE,
    METRICS_FILE, METRICS_HEADER, STEPS_FILE, SUMMARY_FILE,
};

use crate::dist::ProbDist;
use crate::dist::entropy;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl ExperimentError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config { .. } => 2,
            ExperimentError::Io { .. } => 3,
            ExperimentError::Invariant(_) => 4,
        }
    }
}

/// Stop rule of the entropy-stop baseline, given the draft distributions
/// produced so far this step: stop once the latest one is more uncertain
/// than `threshold` or `base_max_k` tokens are drafted.
pub fn entropy_stop_policy(draft_dists_so_far: &[ProbDist], threshold: f64, base_max_k: usize) -> bool {
    match draft_dists_so_far.last() {
        None => false,
        Some(latest) => draft_dists_so_far.len() >= base_max_k || entropy(latest) > threshold,
    }
}
