//! Acceptance suite: runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion. Exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mims::config::{PoolScheme, Variant};
use mims::data::Benchmark;
use mims::gradcheck::run_suite;
use mims::harness::{auroc, feature_corr, localization_probe, median, train, TrainOutcome};
use mims::localization::DEFAULT_LAYER;
use mims::mil::{PoolKind, TopKPool};
use mims::msconv::{KernelGroup, MsConvConfig, MsConvLayer};
use mims::nn::Mode;
use mims::optim::{Adam, Optimizer};
use mims::{ExperimentConfig, Graph, ParamStore, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[cfg(not(feature = "f64"))]
const GRAD_TOL: Real = 1e-2;
#[cfg(feature = "f64")]
const GRAD_TOL: Real = 1e-5;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: &'static str, name: &'static str, checks: Vec<(bool, String)>) -> Verdict {
    Verdict {
        id,
        name,
        pass: checks.iter().all(|c| c.0),
        detail: checks.into_iter().map(|c| c.1).collect::<Vec<_>>().join("; "),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let rows = run_suite(20, 2024).expect("gradient suite");
    let secs = start.elapsed().as_secs_f64();
    let mut checks: Vec<(bool, String)> = rows
        .iter()
        .map(|r| {
            (
                r.cases >= 20 && r.max_rel_error < GRAD_TOL,
                format!("{} {:.2e} ({} cases, {} coords)", r.op, r.max_rel_error, r.cases, r.checked),
            )
        })
        .collect();
    checks.push((secs < 120.0, format!("{secs:.1}s")));
    verdict("1", "gradient suite", checks)
}

/// Direct cross-correlation with zero padding, accumulated in f64.
fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&[Real]>, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0 as Real; n * co * oh * ow];
    for b_ in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for z in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[o] as f64);
                    for c in 0..ci {
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (z * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b_ * ci + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * ci + c) * k + dy) * k + dx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((b_ * co + o) * oh + y) * ow + z] = acc as Real;
                }
            }
        }
    }
    Tensor::new(&[n, co, oh, ow], out).unwrap()
}

fn conv_oracle(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst: Real = 0.0;
    for _ in 0..50 {
        let (n, ci, co) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
        let k = rng.random_range(1..=5usize);
        let (h, w) = (rng.random_range(k..=12), rng.random_range(k..=12));
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=k / 2);
        let x = uniform(rng, &[n, ci, h, w]);
        let wt = uniform(rng, &[co, ci, k, k]);
        let bias = uniform(rng, &[co]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(bias.clone()));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let want = naive_conv(&x, &wt, Some(bias.data()), stride, pad);
        assert_eq!(g.value(y).shape(), want.shape());
        worst = worst.max(g.value(y).max_abs_diff(&want));
    }
    (worst < 1e-4, format!("conv2d vs loops max |Δ| {worst:.2e} (50 cases)"))
}

/// Sort everything, keep the first `min(k, M)` and renormalize their weights.
fn brute_topk(values: &[Real], w: &[Real]) -> Real {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let kk = w.len().min(sorted.len());
    let denom: f64 = w[..kk].iter().map(|&v| v as f64).sum();
    let acc: f64 = sorted[..kk].iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum();
    (acc / denom) as Real
}

fn topk_oracle(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut mismatches = 0;
    for case in 0..100 {
        let k = rng.random_range(1..=8);
        let parts = rng.random_range(1..=3);
        let mut g = Graph::new();
        let mut all = Vec::new();
        let mut vars = Vec::new();
        for _ in 0..parts {
            let len = rng.random_range(1..=12);
            // Every fourth case draws from a few integers so ties are common.
            let t = Tensor::from_fn(&[len], |_| {
                if case % 4 == 0 {
                    rng.random_range(0..4) as Real
                } else {
                    rng.random_range(-5.0..5.0)
                }
            })
            .unwrap();
            all.extend_from_slice(t.data());
            vars.push(g.constant(t));
        }
        let raw: Vec<Real> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: Real = raw.iter().sum();
        let w: Vec<Real> = raw.iter().map(|v| v / s).collect();
        let wv = g.constant(Tensor::from_vec(w.clone()).unwrap());
        let y = g.topk_pool(&vars, wv).unwrap();
        if g.value(y).item().unwrap() != brute_topk(&all, &w) {
            mismatches += 1;
        }
    }
    (mismatches == 0, format!("topk vs sort: {mismatches}/100 mismatches"))
}

fn pair_count_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn auroc_oracle(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut mismatches = 0;
    for case in 0..100 {
        let n = rng.random_range(2..=80);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if case % 2 == 0 {
                    rng.random_range(0..6) as f64
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        if auroc(&scores, &labels).unwrap() != pair_count_auroc(&scores, &labels) {
            mismatches += 1;
        }
    }
    (mismatches == 0, format!("auroc vs pair count: {mismatches}/100 mismatches"))
}

fn msconv_reduces_to_conv(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst: Real = 0.0;
    let mut shapes_ok = true;
    for _ in 0..10 {
        let mut store = ParamStore::new();
        let groups = [KernelGroup { size: 2, out_channels: 3 }, KernelGroup { size: 3, out_channels: 4 }];
        let cfg = MsConvConfig::isotropic(&[1.0], &groups, false, false);
        let layer = MsConvLayer::new(&mut store, rng, "ms", 3, cfg, 1.0).unwrap();
        for k in &layer.kernels {
            let bias = uniform(rng, &[k.group.out_channels]);
            store.set_value(k.bias.unwrap(), bias).unwrap();
        }
        let x = uniform(rng, &[2, 3, 16, 16]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (maps, _) = layer.forward(&mut g, &store, xv, Mode::Train).unwrap();
        for (k, &(v, _)) in layer.kernels.iter().zip(&maps.maps[0]) {
            let bias = store.value(k.bias.unwrap()).data().to_vec();
            let want = naive_conv(&x, store.value(k.weight), Some(&bias), 1, (k.group.size - 1) / 2).map(|v| v.max(0.0));
            shapes_ok &= g.value(v).shape() == want.shape();
            worst = worst.max(g.value(v).max_abs_diff(&want));
        }
    }
    (
        shapes_ok && worst < 1e-5,
        format!("msconv single-scale no-norm vs conv+relu: shapes {}, max |Δ| {worst:.2e}", if shapes_ok { "equal" } else { "differ" }),
    )
}

fn oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    verdict(
        "2",
        "oracle equivalences",
        vec![
            conv_oracle(&mut rng),
            topk_oracle(&mut rng),
            auroc_oracle(&mut rng),
            msconv_reduces_to_conv(&mut rng),
        ],
    )
}

fn pooling_weights() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let pool = TopKPool::new(&mut store, "pool", 5, 1.0).unwrap();
    let mut opt = Adam::new(0.05, 0.9, 0.999, 1e-8);
    for step in 0..1000 {
        // Fresh values each step; the target alternates between pulling the
        // pooled value toward the top element and below the k-th one.
        let values = uniform(&mut rng, &[40]);
        let target = if (step / 100) % 2 == 0 { 2.0 } else { -2.0 };
        let mut g = Graph::new();
        let v = g.constant(values);
        let y = pool.pool(&mut g, &store, &[v]).unwrap();
        let t = g.constant(Tensor::scalar(target));
        let d = g.sub(y, t).unwrap();
        let loss = g.mul(d, d).unwrap();
        g.backward(loss).unwrap();
        store.accumulate_grads(&g.param_grads()).unwrap();
        opt.step(&mut store).unwrap();
    }
    let w = pool.weights(&store);
    let sum: f64 = w.iter().map(|&v| v as f64).sum();
    let simplex = w.iter().all(|&v| v >= 0.0) && (sum - 1.0).abs() < 1e-6;

    let mut max_equal = true;
    for _ in 0..50 {
        let maps: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[2, 4, 5, 5])).collect();
        let mut g = Graph::new();
        let inputs: Vec<(mims::Var, usize)> = maps.iter().map(|m| (g.constant(m.clone()), 0)).collect();
        let one = g.constant(Tensor::from_vec(vec![1.0]).unwrap());
        let top1 = g.channel_pool(&inputs, 4, PoolKind::TopK, Some(one)).unwrap();
        let max = g.channel_pool(&inputs, 4, PoolKind::Max, None).unwrap();
        max_equal &= g.value(top1) == g.value(max);
    }
    verdict(
        "3",
        "top-k weights stay on the simplex; k=1 is max pooling",
        vec![
            (simplex, format!("after 1000 steps w = {w:?}, |Σw-1| = {:.1e}", (sum - 1.0).abs())),
            (max_equal, format!("k=1 vs max: {}", if max_equal { "identical on 50 cases" } else { "differs" })),
        ],
    )
}

struct Trained {
    mims: Vec<TrainOutcome>,
    noresizing: Vec<TrainOutcome>,
    mean_pool: Vec<TrainOutcome>,
    bench: Benchmark,
}

fn run_seeds(base: &ExperimentConfig, bench: &Benchmark) -> Vec<TrainOutcome> {
    SEEDS
        .iter()
        .map(|&seed| {
            let start = Instant::now();
            let cfg = ExperimentConfig { seed, ..base.clone() };
            let out = train(&cfg, &bench.train, &bench.test).expect("training");
            eprintln!(
                "  trained {} pool={} seed={seed}: auroc {:.4} in {:.0}s",
                cfg.variant,
                cfg.pool,
                out.report.auroc,
                start.elapsed().as_secs_f64()
            );
            out
        })
        .collect()
}

fn train_all() -> Trained {
    let bench = Benchmark::generate(0).expect("benchmark");
    let base = ExperimentConfig::default();
    let mims = run_seeds(&base, &bench);
    let noresizing = run_seeds(
        &ExperimentConfig {
            variant: Variant::MimsNoResizing,
            ..base.clone()
        },
        &bench,
    );
    let mean_pool = run_seeds(
        &ExperimentConfig {
            pool: PoolScheme::Mean,
            ..base.clone()
        },
        &bench,
    );
    Trained {
        mims,
        noresizing,
        mean_pool,
        bench,
    }
}

fn median_auroc(runs: &[TrainOutcome]) -> f64 {
    median(&runs.iter().map(|r| r.report.auroc).collect::<Vec<_>>())
}

/// The run whose AUROC is the median of the three seeds.
fn median_run(runs: &[TrainOutcome]) -> &TrainOutcome {
    let mut idx: Vec<usize> = (0..runs.len()).collect();
    idx.sort_by(|&a, &b| runs[a].report.auroc.total_cmp(&runs[b].report.auroc));
    &runs[idx[idx.len() / 2]]
}

fn variant_gap(t: &Trained) -> Verdict {
    let (m, n) = (median_auroc(&t.mims), median_auroc(&t.noresizing));
    let minutes = t
        .mims
        .iter()
        .chain(&t.noresizing)
        .map(|r| r.report.wall_time_s.unwrap_or(0.0))
        .sum::<f64>()
        / 60.0;
    verdict(
        "4",
        "MIMS AUROC and resizing gain",
        vec![
            (m >= 0.90, format!("MIMS median AUROC {m:.4}")),
            (m - n >= 0.02, format!("MIMS - NoResizing {:+.4} (NoResizing {n:.4})", m - n)),
            (minutes / 2.0 < 15.0, format!("{:.1} min per variant", minutes / 2.0)),
        ],
    )
}

fn pool_gap(t: &Trained) -> Verdict {
    let (top, mean) = (median_auroc(&t.mims), median_auroc(&t.mean_pool));
    verdict(
        "5",
        "top-k pooling beats mean pooling",
        vec![(top - mean >= 0.02, format!("topk(k=5) {top:.4} vs mean {mean:.4}: {:+.4}", top - mean))],
    )
}

fn localization(t: &Trained) -> Verdict {
    let model = &median_run(&t.mims).model;
    let r = localization_probe(model, &t.bench.test, 50, DEFAULT_LAYER).expect("localization probe");
    verdict(
        "6",
        "heatmap localization",
        vec![
            (
                r.bags == 50 && r.hit_rate() >= 0.90,
                format!("argmax inside ROI for {}/{} maps ({:.1}%) over {} bags", r.hits, r.emitted, 100.0 * r.hit_rate(), r.bags),
            ),
            (
                r.roi_recall() >= 0.90,
                format!("{}/{} ROI slices emitted ({:.1}%)", r.roi_slices_emitted, r.roi_slices, 100.0 * r.roi_recall()),
            ),
        ],
    )
}

fn decorrelation(t: &Trained) -> Verdict {
    let model = &median_run(&t.mims).model;
    let images: Vec<Tensor> = t.bench.test.bags.iter().take(100).map(|b| b.instances[0].clone()).collect();
    let rows = feature_corr(model, &images, &[1.0, 0.75, 0.5]).expect("feature correlation");
    let r = |i: usize| rows[i].mean_r.unwrap_or(f64::NAN);
    verdict(
        "7",
        "feature decorrelation direction",
        vec![
            (r(0) == 1.0, format!("r(1.0) = {}", r(0))),
            (r(1) > r(2), format!("r(0.75) = {:.4} > r(0.5) = {:.4}", r(1), r(2))),
        ],
    )
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn mims(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_mims"))
        .args(args)
        .env("MIMS_THREADS", "2")
        .output()
        .expect("spawn mims");
    assert!(status.status.success(), "mims {args:?}: {}", String::from_utf8_lossy(&status.stderr));
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let root = tmp.path().join(run);
        let (data, ckpt, heat) = (root.join("data"), root.join("run"), root.join("heat"));
        let s = |p: &Path| p.to_str().unwrap().to_string();
        mims(&["gen-data", "--out", &s(&data), "--seed", "11", "--train-bags", "40", "--test-bags", "20"]);
        mims(&["train", "--dataset", &s(&data), "--epochs", "2", "--seed", "5", "--out", &s(&ckpt)]);
        mims(&["heatmap", "--checkpoint", &s(&ckpt), "--dataset", &s(&data), "--out", &s(&heat)]);
        runs.push([files_under(&data), files_under(&ckpt), files_under(&heat)]);
    }
    let names = ["gen-data", "train", "heatmap"];
    let checks = (0..3)
        .map(|i| {
            let same = runs[0][i] == runs[1][i];
            (same && !runs[0][i].is_empty(), format!("{} {} files {}", names[i], runs[0][i].len(), if same { "identical" } else { "differ" }))
        })
        .collect();
    verdict("8", "byte-identical reruns", checks)
}

fn main() {
    // Optional criterion ids as arguments (`cargo test --test acceptance -- 1 2`);
    // flags forwarded by cargo are ignored.
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let want = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w == id);
    let start = Instant::now();
    let mut verdicts = Vec::new();
    if want("1") {
        verdicts.push(gradient_suite());
    }
    if want("2") {
        verdicts.push(oracles());
    }
    if want("3") {
        verdicts.push(pooling_weights());
    }
    if ["4", "5", "6", "7"].iter().any(|id| want(id)) {
        let trained = train_all();
        let checks: [(&str, fn(&Trained) -> Verdict); 4] =
            [("4", variant_gap), ("5", pool_gap), ("6", localization), ("7", decorrelation)];
        for (id, check) in checks {
            if want(id) {
                verdicts.push(check(&trained));
            }
        }
    }
    if want("8") {
        verdicts.push(determinism());
    }

    println!();
    for v in &verdicts {
        println!("{} {}. {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.name, v.detail);
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("{} of {} criteria passed in {:.0}s", verdicts.len() - failed, verdicts.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
