//! Experiment orchestration: configuration, the training driver, and
//! machine-readable result emission.

pub mod config;
pub mod emit;
pub mod experiment;

pub use config::{ContextStrategyConfig, DatasetConfig, ExperimentConfig};
pub use emit::{
    emit_results, parse_csv, records_to_csv, summarize, MetricsRecord, RunSummary, Split,
    CSV_HEADER,
};
pub use experiment::{
    eval_split, evaluate_checkpoint, fit_gmm_for_config, prepare, run_experiment, run_seed,
    Prepared, RunOutput, SeedRun,
};
