//! Generates the synthetic ring/disk benchmark, writes it to disk and
//! summarizes both splits.
//!
//! cargo run --release --example generate_data -- [out_dir] [seed]

use std::path::PathBuf;

use mims::data::{load_dataset, scale_bin, Benchmark, Dataset};

fn summarize(name: &str, d: &Dataset) {
    let positives = d.bags.iter().filter(|b| b.label == 1).count();
    let instances: usize = d.bags.iter().map(|b| b.len()).sum();
    let mut bins = [0usize; 3];
    let mut rois = 0;
    for t in &d.truth.as_ref().expect("generated").bags {
        rois += t.rois.len();
        if let Some(b) = t.scale.and_then(scale_bin) {
            bins[b] += 1;
        }
    }
    println!(
        "{name}: {} bags ({positives} positive), {instances} instances, {rois} ROI slices, positives per scale bin {bins:?}",
        d.bags.len()
    );
}

fn main() -> mims::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "data".into()));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let bench = Benchmark::generate(seed)?;
    summarize("train", &bench.train);
    summarize("test", &bench.test);
    bench.save(&out)?;
    let back = load_dataset(&out.join("test"))?;
    assert_eq!(back.bags, bench.test.bags);
    println!("wrote {} (reload verified)", out.display());
    Ok(())
}
