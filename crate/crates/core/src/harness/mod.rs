//! Experiment harness: configs, the training loop, metrics files,
//! checkpoints, paired BP/DBP comparisons and learning-rate sweeps.

mod checkpoint;
mod compare;
mod config;
mod metrics;
mod stats;
mod sweep;
mod train;

pub use checkpoint::{
    fuse_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use compare::{
    arm_config, first_reaching, run_paired_comparison, CompareOptions, ComparisonSummary, EpochSummary,
    SeedComparison, SeedRun,
};
pub use config::{Clock, DataSource, Mode, TrainConfig};
pub use metrics::{
    export_metrics, format_float, metrics_csv, parse_metrics, read_metrics, write_metrics, MetricsRecord,
    METRICS_HEADER,
};
pub use stats::{summarize, welch_t_test, Summary, WelchTest};
pub use sweep::{
    best_cell, cell_config, sweep, sweep_table, write_sweep_table, CellResult, SweepCell, SweepOptions,
};
pub use train::{
    evaluate, init_model, metrics_path, prepare_data, run_training, run_training_on, NoObserver, RunOptions,
    TrainObserver, TrainOutcome, BEST_CHECKPOINT, CONFIG_FILE, LAST_CHECKPOINT, METRICS_FILE,
};

use crate::error::{DbpError, Result};

/// Maps `f` over `items` on up to `jobs` threads (0 = all cores), keeping order.
pub fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| DbpError::Config(format!("cannot start worker threads: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(&f).collect()))
}
