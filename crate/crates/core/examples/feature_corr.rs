//! Measures how well stem features survive input resizing: the Pearson
//! correlation between features of an image and of its resized copy.
//!
//! cargo run --release --example feature_corr -- [epochs]

use mims::data::Benchmark;
use mims::harness::{feature_corr, train_model};
use mims::{ExperimentConfig, MimsModel, Tensor};

fn report(title: &str, model: &MimsModel, images: &[Tensor]) -> mims::Result<()> {
    println!("{title}");
    for row in feature_corr(model, images, &[2.0, 1.0, 0.75, 0.5])? {
        let r = row.mean_r.map_or("n/a".into(), |r| format!("{r:.4}"));
        println!("  scale {:<4}  r = {r}  ({} images)", row.scale, row.images);
    }
    Ok(())
}

fn main() -> mims::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(4, |s| s.parse().expect("epochs"));
    let bench = Benchmark::generate(0)?;
    let images: Vec<Tensor> = bench.test.bags.iter().take(100).map(|b| b.instances[0].clone()).collect();
    let config = ExperimentConfig {
        epochs,
        ..ExperimentConfig::default()
    };
    report("untrained stem", &MimsModel::build(&config)?, &images)?;
    let (model, _) = train_model(&config, &bench.train)?;
    report(&format!("stem after {epochs} epochs"), &model, &images)
}
