use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{median, pearson};
use super::par_map;
use super::train::train;
use crate::autodiff::Graph;
use crate::config::{ExperimentConfig, PoolScheme, Variant};
use crate::data::{Benchmark, Dataset};
use crate::error::{Error, Result};
use crate::localization::localize_bag;
use crate::model::MimsModel;
use crate::nn::{resize_tensor, Mode};
use crate::tensor::Tensor;

/// Reference AUROC of each variant on a full-size retinal OCT benchmark, printed next
/// to desk-scale results for context only.
pub fn variant_reference(v: Variant) -> Option<f64> {
    match v {
        Variant::Mims => Some(0.986),
        Variant::MimsNoResizing => Some(0.956),
        Variant::SiCnn => Some(0.983),
        Variant::MiPreConv => Some(0.972),
        Variant::MiPre => Some(0.574),
        Variant::PyramidInput => Some(0.638),
    }
}

/// One column of the aggregation comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolChoice {
    pub scheme: PoolScheme,
    pub k: usize,
}

impl PoolChoice {
    pub fn topk(k: usize) -> Self {
        PoolChoice {
            scheme: PoolScheme::TopK,
            k,
        }
    }

    /// Reference AUROC on the full-size OCT benchmark for this column.
    pub fn reference(&self) -> Option<f64> {
        match (self.scheme, self.k) {
            (PoolScheme::Mean, _) => Some(0.829),
            (PoolScheme::Max, _) => Some(0.960),
            (PoolScheme::MaxInst, _) => Some(0.975),
            (PoolScheme::TopK, 2) | (PoolScheme::TopK, 3) => Some(0.980),
            (PoolScheme::TopK, 4) | (PoolScheme::TopK, 5) => Some(0.986),
            _ => None,
        }
    }

    /// The default comparison: mean, max, max-inst and top-k for k = 1..=5.
    pub fn default_set() -> Vec<PoolChoice> {
        let mut v = vec![
            PoolChoice {
                scheme: PoolScheme::Mean,
                k: 1,
            },
            PoolChoice {
                scheme: PoolScheme::Max,
                k: 1,
            },
            PoolChoice {
                scheme: PoolScheme::MaxInst,
                k: 5,
            },
        ];
        v.extend((1..=5).map(PoolChoice::topk));
        v
    }
}

impl fmt::Display for PoolChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.scheme {
            PoolScheme::TopK => write!(f, "k={}", self.k),
            s => f.write_str(s.name()),
        }
    }
}

/// Accepts `mean`, `max`, `max-inst`, `patchcls-mean`, `topk` (k = 5) and `k=<n>`.
impl FromStr for PoolChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(k) = s.strip_prefix("k=") {
            let k: usize = k
                .parse()
                .map_err(|_| Error::Config(format!("bad k in scheme `{s}`")))?;
            if k == 0 {
                return Err(Error::Config("k must be >= 1".into()));
            }
            return Ok(PoolChoice::topk(k));
        }
        let scheme: PoolScheme = s.parse()?;
        Ok(PoolChoice {
            scheme,
            k: crate::mil::DEFAULT_K,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub label: String,
    pub seeds: Vec<u64>,
    pub aurocs: Vec<f64>,
    pub median: f64,
    pub reference: Option<f64>,
}

fn seed_row(label: String, base: &ExperimentConfig, seeds: &[u64], bench: &Benchmark, reference: Option<f64>) -> Result<SeedRow> {
    let mut aurocs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = ExperimentConfig { seed, ..base.clone() };
        aurocs.push(train(&cfg, &bench.train, &bench.test)?.report.auroc);
    }
    Ok(SeedRow {
        label,
        seeds: seeds.to_vec(),
        median: median(&aurocs),
        aurocs,
        reference,
    })
}

/// Trains one model per (variant, seed) on identical data.
pub fn compare_variants(base: &ExperimentConfig, variants: &[Variant], seeds: &[u64], bench: &Benchmark) -> Result<Vec<SeedRow>> {
    variants
        .iter()
        .map(|&v| {
            let cfg = ExperimentConfig {
                variant: v,
                ..base.clone()
            };
            seed_row(v.name().to_string(), &cfg, seeds, bench, variant_reference(v))
        })
        .collect()
}

/// Trains one model per (scheme, seed) on identical data.
pub fn compare_pools(base: &ExperimentConfig, choices: &[PoolChoice], seeds: &[u64], bench: &Benchmark) -> Result<Vec<SeedRow>> {
    choices
        .iter()
        .map(|c| {
            let cfg = ExperimentConfig {
                pool: c.scheme,
                k: c.k,
                ..base.clone()
            };
            seed_row(c.to_string(), &cfg, seeds, bench, c.reference())
        })
        .collect()
}

/// Renders rows as a fixed-width table.
pub fn format_rows(title: &str, rows: &[SeedRow]) -> String {
    let mut out = format!("{title}\n{:<16} {:>8}  {:<28} {:>9}\n", "method", "median", "per-seed", "reference");
    for r in rows {
        let per: Vec<String> = r.aurocs.iter().map(|a| format!("{a:.3}")).collect();
        let reference = r.reference.map_or("-".to_string(), |v| format!("{v:.3}"));
        out += &format!("{:<16} {:>8.4}  {:<28} {:>9}\n", r.label, r.median, per.join(" "), reference);
    }
    out
}

/// Rows as CSV with columns `method,median,aurocs,reference`.
pub fn rows_to_csv(rows: &[SeedRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "median", "aurocs", "reference"])?;
    for r in rows {
        let per: Vec<String> = r.aurocs.iter().map(|a| a.to_string()).collect();
        w.write_record([
            r.label.clone(),
            r.median.to_string(),
            per.join(";"),
            r.reference.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrRow {
    pub scale: f64,
    /// Mean Pearson r over the images that were not skipped.
    pub mean_r: Option<f64>,
    pub images: usize,
    /// Images skipped because a feature vector had zero variance.
    pub skipped: usize,
    pub reference: Option<f64>,
}

/// Reference correlation of resized-image features with the originals.
pub fn corr_reference(scale: f64) -> Option<f64> {
    [(2.0, 0.261), (0.75, 0.451), (0.5, 0.257)]
        .iter()
        .find(|(s, _)| *s == scale)
        .map(|&(_, r)| r)
}

fn stem_features(model: &MimsModel, image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    let x = image.reshape(&[1, s[0], s[1], s[2]])?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let mut updates = Vec::new();
    let y = model.stem.forward(&mut g, &model.params, xv, Mode::Eval, None, &mut updates)?;
    Ok(g.value(y).clone())
}

/// Mean Pearson correlation between the stem features of each image and
/// those of the image resized by each factor (features resized back to the
/// original grid). Factor 1.0 compares a tensor with itself.
pub fn feature_corr(model: &MimsModel, images: &[Tensor], scales: &[f64]) -> Result<Vec<CorrRow>> {
    for &s in scales {
        if !(s > 0.0 && s <= 8.0) {
            return Err(Error::Config(format!("feature-corr scale {s} outside (0, 8]")));
        }
    }
    let per_image: Vec<Result<Vec<Option<f64>>>> = par_map(images.len(), |i| {
        let img = &images[i];
        let base = stem_features(model, img)?;
        let (fh, fw) = (base.shape()[2], base.shape()[3]);
        let a: Vec<f64> = base.data().iter().map(|&v| v as f64).collect();
        scales
            .iter()
            .map(|&s| {
                let feats = if s == 1.0 {
                    base.clone()
                } else {
                    let (h, w) = (img.shape()[1], img.shape()[2]);
                    let resized = resize_tensor(img, crate::nn::scaled_extent(h, s), crate::nn::scaled_extent(w, s))?;
                    let f = stem_features(model, &resized)?;
                    resize_tensor(&f, fh, fw)?
                };
                let b: Vec<f64> = feats.data().iter().map(|&v| v as f64).collect();
                Ok(pearson(&a, &b))
            })
            .collect()
    });
    let per_image: Vec<Vec<Option<f64>>> = per_image.into_iter().collect::<Result<_>>()?;
    Ok(scales
        .iter()
        .enumerate()
        .map(|(j, &scale)| {
            let rs: Vec<f64> = per_image.iter().filter_map(|r| r[j]).collect();
            let skipped = per_image.len() - rs.len();
            if skipped > 0 {
                eprintln!("warning: feature-corr scale {scale}: skipped {skipped} zero-variance images");
            }
            CorrRow {
                scale,
                mean_r: (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64),
                images: rs.len(),
                skipped,
                reference: corr_reference(scale),
            }
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub bags: usize,
    pub emitted: usize,
    /// Emitted maps whose heatmap argmax falls inside a ROI bounding box of that slice.
    pub hits: usize,
    pub roi_slices: usize,
    pub roi_slices_emitted: usize,
}

impl LocalizationReport {
    pub fn hit_rate(&self) -> f64 {
        if self.emitted == 0 {
            0.0
        } else {
            self.hits as f64 / self.emitted as f64
        }
    }

    pub fn roi_recall(&self) -> f64 {
        if self.roi_slices == 0 {
            0.0
        } else {
            self.roi_slices_emitted as f64 / self.roi_slices as f64
        }
    }
}

/// Localization quality on the first `n_bags` positive bags of `test`,
/// scored against the generator's ground truth.
pub fn localization_probe(model: &MimsModel, test: &Dataset, n_bags: usize, layer: &str) -> Result<LocalizationReport> {
    let truth = test
        .truth
        .as_ref()
        .ok_or_else(|| Error::invalid("localization probe needs ground truth"))?;
    let bags: Vec<_> = test.bags.iter().filter(|b| b.label == 1).take(n_bags).collect();
    let results: Vec<Result<LocalizationReport>> = par_map(bags.len(), |i| {
        let bag = bags[i];
        let t = truth
            .get(&bag.id)
            .ok_or_else(|| Error::invalid(format!("no ground truth for `{}`", bag.id)))?;
        let emitted = localize_bag(model, bag, 1, layer)?;
        let mut r = LocalizationReport {
            bags: 1,
            emitted: emitted.len(),
            roi_slices: t.rois.len(),
            ..Default::default()
        };
        for e in &emitted {
            let (y, x) = e.overlay.p_star.argmax();
            let rois: Vec<_> = t.rois.iter().filter(|r| r.instance == e.instance).collect();
            if !rois.is_empty() {
                r.roi_slices_emitted += 1;
            }
            if rois.iter().any(|r| {
                let [y0, x0, y1, x1] = r.bbox;
                (y0..=y1).contains(&y) && (x0..=x1).contains(&x)
            }) {
                r.hits += 1;
            }
        }
        Ok(r)
    });
    let mut total = LocalizationReport::default();
    for r in results {
        let r = r?;
        total.bags += r.bags;
        total.emitted += r.emitted;
        total.hits += r.hits;
        total.roi_slices += r.roi_slices;
        total.roi_slices_emitted += r.roi_slices_emitted;
    }
    Ok(total)
}
