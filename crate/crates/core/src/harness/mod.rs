//! Config-driven training, evaluation, weight search, ablation sweeps and
//! report emission.

mod config;
mod eval;
mod report;
mod sweep;
mod train;

pub use config::{Budget, DatasetSpec, ExperimentConfig, OptimizerConfig, UdaRun, WeightGrid};
pub use eval::{argmax_channels, compute_metrics, delta_against, evaluate};
pub use report::{load_runs, metric_column, plot_losses, plot_metric_bars, report, write_losses, write_table, RunReport};
pub use sweep::{ablate, ablation_variants, gridsearch, stl_baselines, AblationAxis, SCALE_VARIANTS};
pub use train::{task_loss, train, train_until, train_with_baselines, TrainOutcome};

/// Environment variable requesting deterministic kernels.
pub const DETERMINISTIC_ENV: &str = "DENSEMTL_DETERMINISTIC";

/// Whether `DENSEMTL_DETERMINISTIC=1` is set. The kernels are single
/// threaded with a fixed reduction order, so runs are reproducible either
/// way; the flag is recorded in every report.
pub fn deterministic_requested() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}
