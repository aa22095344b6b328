//! The `mims` command line. Exit codes: 0 success, 1 validation error
//! (bad flags, config or arguments), 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use super::experiments::{compare_pools, feature_corr, format_rows, rows_to_csv, PoolChoice};
use super::train::{evaluate, train_with, MetricsReport};
use crate::config::{ExperimentConfig, PoolScheme, Variant};
use crate::data::{Benchmark, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gradcheck::run_suite;
use crate::localization::{localize_bag, write_emitted, DEFAULT_LAYER};
use crate::model::MimsModel;
use crate::tensor::Real;

#[derive(Parser, Debug)]
#[command(name = "mims", version, about = "Multi-instance multi-scale CNN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark into `<out>/train` and `<out>/test`.
    GenData(GenDataArgs),
    /// Train a model, evaluate it and write a checkpoint plus report.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test split.
    Eval(EvalArgs),
    /// Train one model per pooling scheme and tabulate AUROC.
    ComparePools(ComparePoolsArgs),
    /// Write gradient × input heatmaps for the instances a model marks positive.
    Heatmap(HeatmapArgs),
    /// Correlate stem features of resized images with those of the originals.
    FeatureCorr(FeatureCorrArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Default)]
struct ModelOverrides {
    /// Experiment config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    pool: Option<PoolScheme>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    #[arg(long)]
    lr: Option<Real>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_bags: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    backbone_lr_factor: Option<Real>,
    #[arg(long)]
    input_pyramid: bool,
}

#[derive(Args, Debug)]
struct DataSource {
    /// Dataset root with `train/` and `test/`; defaults to the config's
    /// `dataset`, else the benchmark is generated in memory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Seed of the in-memory benchmark.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 400)]
    train_bags: usize,
    #[arg(long, default_value_t = 200)]
    test_bags: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelOverrides,
    #[command(flatten)]
    data: DataSource,
    /// Output directory for the checkpoint and report.json.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataSource,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ComparePoolsArgs {
    #[command(flatten)]
    model: ModelOverrides,
    #[command(flatten)]
    data: DataSource,
    /// Comma-separated schemes: mean, max, max-inst, patchcls-mean, topk, k=<n>.
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataSource,
    /// Bags to visualize (default: every positive test bag).
    #[arg(long, value_delimiter = ',')]
    bags: Option<Vec<String>>,
    #[arg(long, default_value = DEFAULT_LAYER)]
    layer: String,
    #[arg(long, default_value_t = 1)]
    class: u8,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct FeatureCorrArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataSource,
    #[arg(long, value_delimiter = ',', default_value = "2,0.75,0.5,1")]
    scales: Vec<f64>,
    /// Number of test images (first instance of each bag).
    #[arg(long, default_value_t = 100)]
    images: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn build_config(o: &ModelOverrides) -> Result<ExperimentConfig> {
    let mut c = match &o.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = o.variant {
        c.variant = v;
    }
    if let Some(p) = o.pool {
        c.pool = p;
    }
    if let Some(k) = o.k {
        c.k = k;
    }
    if let Some(s) = &o.scales {
        c.scales = s.clone();
    }
    if let Some(lr) = o.lr {
        c.lr = lr;
    }
    if let Some(e) = o.epochs {
        c.epochs = e;
    }
    if let Some(b) = o.batch_bags {
        c.batch_bags = b;
    }
    if let Some(s) = o.seed {
        c.seed = s;
    }
    if let Some(f) = o.backbone_lr_factor {
        c.backbone_lr_factor = f;
    }
    if o.input_pyramid {
        c.input_pyramid = true;
    }
    c.validate()?;
    Ok(c)
}

fn load_benchmark(src: &DataSource, config_root: Option<&Path>) -> Result<Benchmark> {
    match src.dataset.as_deref().or(config_root) {
        Some(root) => Benchmark::load(root),
        None => Benchmark::generate(src.data_seed),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_report(r: &MetricsReport) {
    println!("variant {}  pool {}  k {}  seed {}", r.variant, r.pool, r.k, r.seed);
    println!("test AUROC      {:.4}", r.auroc);
    for b in &r.per_scale_bin {
        let v = b.auroc.map_or("-".to_string(), |a| format!("{a:.4}"));
        println!("  scale [{:.2}, {:.2})  {v}  ({} positives)", b.lo, b.hi, b.positives);
    }
    println!("parameters      {} ({} in msconv)", r.param_count, r.msconv_param_count);
    if let Some(t) = r.wall_time_s {
        println!("wall time       {t:.1}s");
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => {
            let bench = Benchmark::from_spec(&SyntheticSpec::default(), a.seed, a.train_bags, a.test_bags)?;
            bench.save(&a.out)?;
            let summary = serde_json::json!({
                "out": a.out,
                "seed": a.seed,
                "train_bags": bench.train.bags.len(),
                "test_bags": bench.test.bags.len(),
                "train_instances": bench.train.bags.iter().map(|b| b.len()).sum::<usize>(),
                "test_instances": bench.test.bags.iter().map(|b| b.len()).sum::<usize>(),
            });
            if a.json {
                print_json(&summary)?;
            } else {
                println!(
                    "wrote {} train and {} test bags to {}",
                    bench.train.bags.len(),
                    bench.test.bags.len(),
                    a.out.display()
                );
            }
        }
        Command::Train(a) => {
            let cfg = build_config(&a.model)?;
            let bench = load_benchmark(&a.data, cfg.dataset.as_deref())?;
            let quiet = a.json;
            let out = train_with(&cfg, &bench.train, &bench.test, |epoch, loss| {
                if !quiet {
                    eprintln!("epoch {:>3}  loss {loss:.4}", epoch + 1);
                }
            })?;
            out.model.save_checkpoint(&a.out)?;
            let mut file_report = out.report.clone();
            file_report.wall_time_s = None;
            write_text(&a.out.join("report.json"), &(serde_json::to_string_pretty(&file_report)? + "\n"))?;
            if a.json {
                print_json(&out.report)?;
            } else {
                print_report(&out.report);
                println!("checkpoint      {}", a.out.display());
            }
        }
        Command::Eval(a) => {
            let model = MimsModel::load_checkpoint(&a.checkpoint)?;
            let bench = load_benchmark(&a.data, model.config.dataset.as_deref())?;
            let (auroc, bins) = evaluate(&model, &bench.test)?;
            let report = MetricsReport {
                variant: model.config.variant.name().to_string(),
                pool: model.config.pool.name().to_string(),
                k: model.config.k,
                seed: model.config.seed,
                epochs: model.config.epochs,
                auroc,
                per_scale_bin: bins,
                param_count: model.param_count(),
                msconv_param_count: model.msconv_param_count(),
                train_loss: Vec::new(),
                wall_time_s: None,
            };
            if a.json {
                print_json(&report)?;
            } else {
                print_report(&report);
            }
        }
        Command::ComparePools(a) => {
            let cfg = build_config(&a.model)?;
            let choices = match &a.schemes {
                Some(list) => list.iter().map(|s| s.parse()).collect::<Result<Vec<PoolChoice>>>()?,
                None => PoolChoice::default_set(),
            };
            if a.seeds.is_empty() {
                return Err(Error::Config("at least one seed is required".into()));
            }
            let bench = load_benchmark(&a.data, cfg.dataset.as_deref())?;
            let rows = compare_pools(&cfg, &choices, &a.seeds, &bench)?;
            if let Some(path) = &a.csv {
                write_text(path, &rows_to_csv(&rows)?)?;
            }
            if a.json {
                print_json(&rows)?;
            } else {
                print!("{}", format_rows("AUROC by aggregation scheme (reference: full-size OCT results)", &rows));
            }
        }
        Command::Heatmap(a) => {
            if a.class > 1 {
                return Err(Error::Config(format!("class {} is not 0 or 1", a.class)));
            }
            let model = MimsModel::load_checkpoint(&a.checkpoint)?;
            let bench = load_benchmark(&a.data, model.config.dataset.as_deref())?;
            let bags: Vec<_> = match &a.bags {
                Some(ids) => ids
                    .iter()
                    .map(|id| {
                        bench
                            .test
                            .bags
                            .iter()
                            .find(|b| &b.id == id)
                            .ok_or_else(|| Error::Config(format!("no test bag `{id}`")))
                    })
                    .collect::<Result<_>>()?,
                None => bench.test.bags.iter().filter(|b| b.label == 1).collect(),
            };
            let mut written = Vec::new();
            for bag in bags {
                let emitted = localize_bag(&model, bag, a.class, &a.layer)?;
                for e in &emitted {
                    if !a.json {
                        println!(
                            "{} slice {}  p={:.3}  argmax {:?}",
                            bag.id,
                            e.instance,
                            e.probability,
                            e.overlay.p_star.argmax()
                        );
                    }
                }
                written.extend(write_emitted(&bag.id, &emitted, &a.out)?);
            }
            if a.json {
                print_json(&written)?;
            } else {
                println!("wrote {} files to {}", written.len(), a.out.display());
            }
        }
        Command::FeatureCorr(a) => {
            let model = MimsModel::load_checkpoint(&a.checkpoint)?;
            let bench = load_benchmark(&a.data, model.config.dataset.as_deref())?;
            let images: Vec<_> = bench.test.bags.iter().take(a.images).map(|b| b.instances[0].clone()).collect();
            let rows = feature_corr(&model, &images, &a.scales)?;
            if a.json {
                print_json(&rows)?;
            } else {
                println!("{:<8} {:>10} {:>8} {:>8} {:>10}", "scale", "pearson r", "images", "skipped", "reference");
                for r in &rows {
                    let v = r.mean_r.map_or("-".to_string(), |v| format!("{v:.4}"));
                    let reference = r.reference.map_or("-".to_string(), |v| format!("{v:.3}"));
                    println!("{:<8} {v:>10} {:>8} {:>8} {reference:>10}", r.scale, r.images, r.skipped);
                }
            }
        }
        Command::Gradcheck(a) => {
            if a.cases == 0 {
                return Err(Error::Config("cases must be >= 1".into()));
            }
            let rows = run_suite(a.cases, a.seed)?;
            if a.json {
                let v: Vec<_> = rows
                    .iter()
                    .map(|r| {
                        serde_json::json!({
                            "op": r.op,
                            "cases": r.cases,
                            "max_rel_error": r.max_rel_error,
                            "max_elem_error": r.max_elem_error,
                            "checked": r.checked,
                            "skipped": r.skipped,
                        })
                    })
                    .collect();
                print_json(&v)?;
            } else {
                println!(
                    "{:<18} {:>6} {:>14} {:>14} {:>9} {:>9}",
                    "op", "cases", "max rel error", "max elem error", "checked", "skipped"
                );
                for r in &rows {
                    println!(
                        "{:<18} {:>6} {:>14.3e} {:>14.3e} {:>9} {:>9}",
                        r.op, r.cases, r.max_rel_error, r.max_elem_error, r.checked, r.skipped
                    );
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_a_validation_error() {
        assert_eq!(run(["mims", "frobnicate"]), 1);
        assert_eq!(run(["mims", "train", "--no-such-flag"]), 1);
        assert_eq!(run(["mims", "--help"]), 0);
    }

    #[test]
    fn bad_config_values_exit_1() {
        assert_eq!(run(["mims", "train", "--k", "0", "--epochs", "0"]), 1);
        assert_eq!(run(["mims", "train", "--variant", "resnet"]), 1);
        assert_eq!(run(["mims", "gradcheck", "--cases", "0"]), 1);
    }

    #[test]
    fn missing_checkpoint_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("none");
        assert_eq!(run(["mims", "eval", "--checkpoint", ck.to_str().unwrap()]), 2);
    }

    #[test]
    fn overrides_apply_on_top_of_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"variant": "si-cnn", "k": 3}"#).unwrap();
        let o = ModelOverrides {
            config: Some(p),
            k: Some(4),
            ..Default::default()
        };
        let c = build_config(&o).unwrap();
        assert_eq!(c.variant, Variant::SiCnn);
        assert_eq!(c.k, 4);
        assert_eq!(c.pool, PoolScheme::TopK);
    }
}
