//! Trains the full model and its ablations on a reduced benchmark and prints
//! test AUROC next to the full-size reference for each variant.
//!
//! cargo run --release --example ablations -- [epochs]

use mims::config::Variant;
use mims::data::Benchmark;
use mims::harness::compare_variants;
use mims::harness::experiments::format_rows;
use mims::ExperimentConfig;

fn main() -> mims::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(3, |s| s.parse().expect("epochs"));
    let bench = Benchmark::generate_sized(0, 160, 80)?;
    let base = ExperimentConfig {
        epochs,
        ..ExperimentConfig::default()
    };
    let rows = compare_variants(&base, &Variant::ALL, &[0], &bench)?;
    print!("{}", format_rows("variant", &rows));
    Ok(())
}
