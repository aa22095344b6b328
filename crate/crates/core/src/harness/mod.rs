//! Training, evaluation, comparison experiments and the command line.

pub mod cli;
pub mod experiments;
pub mod metrics;
pub mod train;

use std::sync::OnceLock;

use rayon::prelude::*;

pub use experiments::{
    compare_pools, compare_variants, feature_corr, localization_probe, CorrRow, LocalizationReport, PoolChoice, SeedRow,
};
pub use metrics::{auroc, median, pearson};
pub use train::{evaluate, score_bags, train, train_model, BinAuroc, MetricsReport, TrainOutcome};

/// Worker threads for evaluation and data generation: `MIMS_THREADS` when
/// set to a positive integer, otherwise the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("MIMS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(worker_threads())
            .build()
            .expect("thread pool")
    })
}

/// `f(0..n)` on the worker pool; results keep index order.
pub fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if n <= 1 || worker_threads() == 1 {
        return (0..n).map(f).collect();
    }
    pool().install(|| (0..n).into_par_iter().map(f).collect())
}
