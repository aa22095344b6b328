//! Trains full MIMS on the synthetic benchmark and reports test AUROC per
//! ROI scale bin, then saves a checkpoint.
//!
//! cargo run --release --example train_synthetic -- [epochs] [seed]

use mims::data::Benchmark;
use mims::harness::train::train_with;
use mims::ExperimentConfig;

fn main() -> mims::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(4, |s| s.parse().expect("epochs"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let bench = Benchmark::generate(0)?;
    let config = ExperimentConfig {
        epochs,
        seed,
        ..ExperimentConfig::default()
    };
    let out = train_with(&config, &bench.train, &bench.test, |epoch, loss| {
        println!("epoch {epoch:>2}  loss {loss:.4}");
    })?;
    let r = &out.report;
    println!("test AUROC {:.4} ({} parameters, {} in msconv)", r.auroc, r.param_count, r.msconv_param_count);
    for b in &r.per_scale_bin {
        let a = b.auroc.map_or("n/a".into(), |a| format!("{a:.4}"));
        println!("  scales [{:.2}, {:.2}): AUROC {a} over {} positives", b.lo, b.hi, b.positives);
    }
    let dir = std::env::temp_dir().join("mims_train_synthetic");
    out.model.save_checkpoint(&dir)?;
    println!("checkpoint in {}", dir.display());
    Ok(())
}
