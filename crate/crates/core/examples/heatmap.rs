//! Trains a model briefly, then writes gradient × input heatmaps for a few
//! positive test bags and checks where each heatmap peaks.
//!
//! cargo run --release --example heatmap -- [out_dir]

use std::path::PathBuf;

use mims::data::Benchmark;
use mims::harness::train_model;
use mims::localization::{localize_bag, write_emitted, DEFAULT_LAYER};
use mims::ExperimentConfig;

fn main() -> mims::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "heatmaps".into()));
    let bench = Benchmark::generate(0)?;
    let config = ExperimentConfig {
        epochs: 4,
        ..ExperimentConfig::default()
    };
    let (model, _) = train_model(&config, &bench.train)?;
    let truth = bench.test.truth.as_ref().expect("generated");

    for bag in bench.test.bags.iter().filter(|b| b.label == 1).take(4) {
        let emitted = localize_bag(&model, bag, 1, DEFAULT_LAYER)?;
        let rois = &truth.get(&bag.id).expect("truth").rois;
        for e in &emitted {
            let (y, x) = e.overlay.p_star.argmax();
            let hit = rois.iter().any(|r| {
                let [y0, x0, y1, x1] = r.bbox;
                r.instance == e.instance && (y0..=y1).contains(&y) && (x0..=x1).contains(&x)
            });
            println!(
                "{} slice {}: p = {:.3}, peak at ({y}, {x}) {}",
                bag.id,
                e.instance,
                e.probability,
                if hit { "inside the ROI" } else { "outside every ROI" }
            );
        }
        write_emitted(&bag.id, &emitted, &out)?;
    }
    println!("images in {}", out.display());
    Ok(())
}
