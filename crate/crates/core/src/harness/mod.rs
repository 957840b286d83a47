//! Training loop, evaluation, sweeps, and metrics/figure output.

mod config;
mod eval;
mod metrics;
mod plot;
mod sweep;
mod train;

pub use config::{Algorithm, RewardConfig, RewardKind, TrainConfig};
pub use eval::{
    compare, evaluate, kl_estimate, Comparison, KlEstimate, PromptEvaluation, RewardEvaluation,
};
pub use metrics::{emit_metrics, emit_updates, parse_metrics, parse_updates};
pub use plot::{emit_plots, emit_sweep_plots, line_chart, Series};
pub use sweep::{emit_sweep_table, summarize, sweep, RunSummary, SweepRun};
pub use train::{
    build_reference, check_reference, run_training, training_offline_dataset, Divergence,
    EpochStats, RunResult, UpdateStats,
};
