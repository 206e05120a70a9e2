//! Experiment configuration, run orchestration and multi-run suites.

mod config;
mod run;
mod suites;

pub use config::{resolve_config, AugmentConfig, DataConfig, ExperimentConfig, Provenance, ResolvedConfig, RunConfig};
pub use run::{
    checkpoint_path, evaluate_checkpoint, run_training, EvalSplit, ExperimentData, RunSummary, TrainingOutcome,
    CONFIG_FILE, EVALS_FILE, FINAL_CHECKPOINT, METRICS_FILE, SUMMARY_FILE,
};
pub use suites::{
    population_stats, run_ablation_suite, run_stability, AblationRow, AblationTable, SeedResult, StabilityReport,
};
