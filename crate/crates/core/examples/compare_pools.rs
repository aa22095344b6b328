//! Compares bag aggregation schemes (mean, max, instance max, top-k) on a
//! reduced benchmark and prints a median-over-seeds table.
//!
//! cargo run --release --example compare_pools -- [epochs]

use mims::data::Benchmark;
use mims::harness::experiments::format_rows;
use mims::harness::{compare_pools, PoolChoice};
use mims::ExperimentConfig;

fn main() -> mims::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(3, |s| s.parse().expect("epochs"));
    let bench = Benchmark::generate_sized(0, 160, 80)?;
    let base = ExperimentConfig {
        epochs,
        ..ExperimentConfig::default()
    };
    let choices: Vec<PoolChoice> = ["mean", "max", "max-inst", "k=1", "k=3", "k=5"]
        .iter()
        .map(|s| s.parse())
        .collect::<mims::Result<_>>()?;
    let rows = compare_pools(&base, &choices, &[0, 1], &bench)?;
    print!("{}", format_rows("pooling", &rows));
    Ok(())
}
