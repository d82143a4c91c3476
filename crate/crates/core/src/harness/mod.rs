//! Experiment runner: configuration, per-step decisions, variants, and metrics files.

mod config;
mod metrics;
mod run;

pub use config::{BcSection, ConfigFile, EnvSettings, ExperimentConfig, RunSection, Variant};
pub use metrics::{emit_metrics, parse_metrics, read_metrics, render_metrics, summarize, Format, MetricsRow, Summary, COLUMNS};
pub use run::{
    budget_sweep, compare_voting, decide, derive_seed, greedy_success, run_episode, run_task, run_variant,
    run_variant_outcomes, train_snapshot, Decision, DecisionSettings, EpisodeRun, TaskOutcome,
};
