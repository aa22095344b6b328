//! The full pipeline: a small convolutional stem produces primary feature
//! maps for every instance of a bag, the multi-scale layer turns them into
//! secondary maps, MIL pooling collapses them into one `N`-vector per bag and
//! a fully connected layer maps that vector to a logit.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::{ExperimentConfig, PoolScheme, PYRAMID_SCALES};
use crate::error::{Error, Result};
use crate::mil::{pool_bag, TopKPool};
use crate::msconv::{he_normal, MsConvBnUpdate, MsConvLayer, ScaledFeatureMaps};
use crate::nn::{logistic, BatchNorm2d, BatchStats, Mode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// A multiple-instance bag: ordered 2D instances sharing one binary label.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub id: String,
    /// `[c, h, w]` tensors, all of the same shape.
    pub instances: Vec<Tensor>,
    pub label: u8,
}

impl Bag {
    pub fn new(id: impl Into<String>, instances: Vec<Tensor>, label: u8) -> Result<Self> {
        let id = id.into();
        let first = instances
            .first()
            .ok_or_else(|| Error::invalid(format!("bag `{id}` has no instances")))?;
        if first.ndim() != 3 {
            return Err(Error::InvalidShape {
                shape: first.shape().to_vec(),
                reason: format!("bag `{id}` instances must be [c, h, w]"),
            });
        }
        if let Some(bad) = instances.iter().find(|t| t.shape() != first.shape()) {
            return Err(Error::ShapeMismatch {
                op: "bag",
                lhs: first.shape().to_vec(),
                rhs: bad.shape().to_vec(),
            });
        }
        if label > 1 {
            return Err(Error::invalid(format!("bag `{id}` label {label} is not 0 or 1")));
        }
        Ok(Bag { id, instances, label })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// All instances as one `[n, c, h, w]` batch.
    pub fn stacked(&self) -> Tensor {
        let s = self.instances[0].shape();
        let parts: Vec<Tensor> = self
            .instances
            .iter()
            .map(|t| t.reshape(&[1, s[0], s[1], s[2]]).expect("same element count"))
            .collect();
        Tensor::stack_outer(&parts).expect("instances share a shape")
    }

    /// The single-instance sub-bag holding instance `index`.
    pub fn instance_bag(&self, index: usize) -> Result<Bag> {
        let inst = self
            .instances
            .get(index)
            .ok_or_else(|| Error::invalid(format!("bag `{}` has no instance {index}", self.id)))?;
        Ok(Bag {
            id: format!("{}#{index}", self.id),
            instances: vec![inst.clone()],
            label: self.label,
        })
    }
}

/// conv3×3 → batchnorm → relu → 2×2 max-pool.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bn: BatchNorm2d,
}

/// Trainable stand-in for a pretrained feature extractor.
#[derive(Clone, Debug)]
pub struct BackboneStem {
    pub in_channels: usize,
    pub blocks: Vec<ConvBlock>,
}

impl BackboneStem {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        channels: &[usize],
        lr_scale: Real,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(channels.len());
        let mut c_in = in_channels;
        for (i, &c_out) in channels.iter().enumerate() {
            let w = he_normal(rng, &[c_out, c_in, 3, 3], c_in * 9)?;
            blocks.push(ConvBlock {
                weight: store.add(format!("stem.{i}.weight"), w, lr_scale)?,
                bn: BatchNorm2d::new(store, &format!("stem.{i}.bn"), c_out, lr_scale)?,
            });
            c_in = c_out;
        }
        Ok(BackboneStem { in_channels, blocks })
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.bn.channels)
    }

    /// Output extent for an input extent (each block halves with floor).
    pub fn out_extent(&self, extent: usize) -> usize {
        self.blocks.iter().fold(extent, |e, _| e / 2)
    }

    /// Returns the primary maps; block outputs are appended to `taps` as `stem.{i}`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        mut taps: Option<&mut Vec<(String, Var)>>,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            let w = g.param(store, block.weight);
            let y = g.conv2d(h, w, None, 1, 1)?;
            let (y, stats) = block.bn.forward(g, store, y, 0, mode)?;
            if let Some(stats) = stats {
                updates.push(BnUpdate::Stem { block: i, stats });
            }
            let y = g.relu(y);
            h = g.max_pool2(y)?;
            if let Some(t) = taps.as_deref_mut() {
                t.push((format!("stem.{i}"), h));
            }
        }
        Ok(h)
    }
}

/// A running-statistics update produced by a train-mode forward pass.
#[derive(Clone, Debug)]
pub enum BnUpdate {
    Stem { block: usize, stats: BatchStats },
    MsConv(MsConvBnUpdate),
}

/// Graph handles produced by [`MimsModel::forward`].
#[derive(Clone, Debug)]
pub struct BagForward {
    /// Bag logit, shape `[1]`.
    pub logit: Var,
    /// Pooled bag feature, shape `[N]`.
    pub feature: Var,
    /// Named activations of the full-resolution instances: `input`,
    /// `stem.{i}` and `primary` (the stem output).
    pub taps: Vec<(String, Var)>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Graph handles produced by [`MimsModel::forward_batch`].
#[derive(Clone, Debug)]
pub struct BatchForward {
    /// One `[1]` logit per bag, in input order.
    pub logits: Vec<Var>,
    pub bn_updates: Vec<BnUpdate>,
}

impl BagForward {
    pub fn tap(&self, layer: &str) -> Result<Var> {
        self.taps
            .iter()
            .find(|(name, _)| name == layer)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct MimsModel {
    pub config: ExperimentConfig,
    pub params: ParamStore,
    pub stem: BackboneStem,
    pub msconv: Option<MsConvLayer>,
    pub pool: Option<TopKPool>,
    pub classifier_weight: ParamId,
    pub classifier_bias: ParamId,
}

impl MimsModel {
    /// Builds the variant described by `config` with seeded initial weights.
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let stem = BackboneStem::new(
            &mut params,
            &mut rng,
            config.in_channels,
            &config.stem_channels,
            config.backbone_lr_factor,
        )?;
        let msconv = config
            .msconv()
            .map(|ms| MsConvLayer::new(&mut params, &mut rng, "msconv", stem.out_channels(), ms, 1.0))
            .transpose()?;
        let n = msconv.as_ref().map_or(stem.out_channels(), |m| m.channels());
        let pool = if config.pool == PoolScheme::Mean || config.pool == PoolScheme::Max {
            None
        } else {
            Some(TopKPool::new(&mut params, "pool", config.k, config.topk_decay)?)
        };
        let normal = Normal::new(0.0f64, (1.0 / n as f64).sqrt()).expect("positive std");
        let w = Tensor::from_fn(&[n, 1], |_| normal.sample(&mut rng) as Real)?;
        let classifier_weight = params.add("classifier.weight", w, 1.0)?;
        let classifier_bias = params.add("classifier.bias", Tensor::zeros(&[1])?, 1.0)?;
        Ok(MimsModel {
            config: config.clone(),
            params,
            stem,
            msconv,
            pool,
            classifier_weight,
            classifier_bias,
        })
    }

    /// Width `N` of the pooled bag feature.
    pub fn feature_width(&self) -> usize {
        self.msconv.as_ref().map_or(self.stem.out_channels(), |m| m.channels())
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn msconv_param_count(&self) -> usize {
        self.params.num_scalars_with_prefix("msconv.")
    }

    pub fn forward(&self, g: &mut Graph, bag: &Bag, mode: Mode) -> Result<BagForward> {
        self.forward_with(g, bag, mode, false)
    }

    /// Like [`MimsModel::forward`]; `track_input` makes the `input` tap differentiable.
    pub fn forward_with(&self, g: &mut Graph, bag: &Bag, mode: Mode, track_input: bool) -> Result<BagForward> {
        self.forward_inner(g, bag, mode, track_input).map_err(|e| Error::Bag {
            id: bag.id.clone(),
            source: Box::new(e),
        })
    }

    fn forward_inner(&self, g: &mut Graph, bag: &Bag, mode: Mode, track_input: bool) -> Result<BagForward> {
        if bag.is_empty() {
            return Err(Error::invalid("empty bag"));
        }
        let stacked = bag.stacked();
        let x = if track_input { g.variable(stacked) } else { g.constant(stacked) };
        self.forward_input(g, x, mode)
    }

    /// Forward pass from an existing `[n, c, h, w]` node holding the
    /// instances of one bag.
    pub fn forward_input(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<BagForward> {
        let n_instances = g.value(x).shape()[0];
        let mut taps = vec![("input".to_string(), x)];
        let mut updates = Vec::new();
        let features = self.feature_maps(g, x, mode, Some(&mut taps), &mut updates)?;
        let (logit, feature) = self.bag_head(g, &features, n_instances)?;
        Ok(BagForward {
            logit,
            feature,
            taps,
            bn_updates: updates,
        })
    }

    /// Train-style forward of several bags at once. All instances go through
    /// the stem and the multi-scale layer as one batch, so train-mode
    /// batchnorm sees the statistics of the whole mini-batch; pooling and
    /// classification stay per bag.
    pub fn forward_batch(&self, g: &mut Graph, bags: &[&Bag], mode: Mode) -> Result<BatchForward> {
        let mut instances = Vec::new();
        for bag in bags {
            if bag.is_empty() {
                return Err(Error::Bag {
                    id: bag.id.clone(),
                    source: Box::new(Error::invalid("empty bag")),
                });
            }
            instances.push(bag.stacked());
        }
        let x = g.constant(Tensor::stack_outer(&instances)?);
        let mut bn_updates = Vec::new();
        let features = self.feature_maps(g, x, mode, None, &mut bn_updates)?;
        let mut logits = Vec::with_capacity(bags.len());
        let mut start = 0;
        for bag in bags {
            let own: Vec<ScaledFeatureMaps> = features
                .iter()
                .map(|f| f.slice_range(g, start, bag.len()))
                .collect::<Result<_>>()?;
            logits.push(self.bag_head(g, &own, bag.len())?.0);
            start += bag.len();
        }
        Ok(BatchForward { logits, bn_updates })
    }

    fn feature_maps(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        mut taps: Option<&mut Vec<(String, Var)>>,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Vec<ScaledFeatureMaps>> {
        let store = &self.params;
        let levels: &[f64] = if self.config.uses_input_pyramid() { &PYRAMID_SCALES } else { &[1.0] };
        let mut features = Vec::with_capacity(levels.len());
        for &s in levels {
            let full = s == 1.0;
            let xs = if full { x } else { g.bilinear_resize(x, s, s)? };
            let level_taps = if full { taps.as_deref_mut() } else { None };
            let primary = self.stem.forward(g, store, xs, mode, level_taps, updates)?;
            if full {
                if let Some(t) = taps.as_deref_mut() {
                    t.push(("primary".to_string(), primary));
                }
            }
            let maps = match &self.msconv {
                Some(ms) => {
                    let (maps, ups) = ms.forward(g, store, primary, mode)?;
                    updates.extend(ups.into_iter().map(BnUpdate::MsConv));
                    maps
                }
                None => ScaledFeatureMaps::single(primary, self.stem.out_channels()),
            };
            features.push(maps);
        }
        Ok(features)
    }

    /// Pools the feature maps of one bag and classifies; returns `(logit, feature)`.
    fn bag_head(&self, g: &mut Graph, features: &[ScaledFeatureMaps], n_instances: usize) -> Result<(Var, Var)> {
        let store = &self.params;
        let scheme = self.config.pool;
        if scheme.is_instance_level() {
            let mut logits = Vec::with_capacity(n_instances);
            let mut feats = Vec::with_capacity(n_instances);
            for i in 0..n_instances {
                let inst: Vec<ScaledFeatureMaps> = features
                    .iter()
                    .map(|f| f.slice_instance(g, i))
                    .collect::<Result<_>>()?;
                let refs: Vec<&ScaledFeatureMaps> = inst.iter().collect();
                let f = pool_bag(g, store, &refs, scheme.feature_pool(), self.pool.as_ref())?;
                logits.push(self.classify(g, f)?);
                feats.push(f);
            }
            let all = g.concat(&logits, 0)?;
            let logit = match scheme {
                PoolScheme::MaxInst => g.max(all),
                _ => {
                    let p = g.sigmoid(all);
                    let p = g.mean(p);
                    let p = g.clamp(p, 1e-6, 1.0 - 1e-6);
                    let one = g.constant(Tensor::scalar(1.0));
                    let q = g.sub(one, p)?;
                    let (lp, lq) = (g.log(p), g.log(q));
                    g.sub(lp, lq)?
                }
            };
            let mut sum = feats[0];
            for &f in &feats[1..] {
                sum = g.add(sum, f)?;
            }
            Ok((logit, g.scale(sum, 1.0 / feats.len() as Real)))
        } else {
            let refs: Vec<&ScaledFeatureMaps> = features.iter().collect();
            let f = pool_bag(g, store, &refs, scheme.feature_pool(), self.pool.as_ref())?;
            Ok((self.classify(g, f)?, f))
        }
    }

    fn classify(&self, g: &mut Graph, feature: Var) -> Result<Var> {
        let n = g.value(feature).numel();
        let x = g.reshape(feature, &[1, n])?;
        let w = g.param(&self.params, self.classifier_weight);
        let b = g.param(&self.params, self.classifier_bias);
        let z = g.fully_connected(x, w, b)?;
        g.reshape(z, &[1])
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            match u {
                BnUpdate::Stem { block, stats } => self.stem.blocks[*block].bn.update_running(0, stats),
                BnUpdate::MsConv(u) => {
                    if let Some(ms) = &mut self.msconv {
                        ms.apply_bn_update(u);
                    }
                }
            }
        }
    }

    /// Eval-mode bag logit.
    pub fn logit(&self, bag: &Bag) -> Result<Real> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, bag, Mode::Eval)?;
        g.value(out.logit).item()
    }

    /// Eval-mode bag probability.
    pub fn predict(&self, bag: &Bag) -> Result<Real> {
        Ok(logistic(self.logit(bag)?))
    }

    /// Eval-mode probability of every single-instance sub-bag.
    pub fn forward_instancewise(&self, bag: &Bag) -> Result<Vec<Real>> {
        (0..bag.len()).map(|i| self.predict(&bag.instance_bag(i)?)).collect()
    }

    fn batchnorms(&self) -> Vec<(String, &BatchNorm2d)> {
        let mut out: Vec<_> = self
            .stem
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (format!("stem.{i}.bn"), &b.bn))
            .collect();
        if let Some(norms) = self.msconv.as_ref().and_then(|m| m.norms.as_ref()) {
            out.extend(norms.iter().enumerate().map(|(i, bn)| (format!("msconv.bn{i}"), bn)));
        }
        out
    }

    fn batchnorms_mut(&mut self) -> Vec<(String, &mut BatchNorm2d)> {
        let mut out: Vec<_> = self
            .stem
            .blocks
            .iter_mut()
            .enumerate()
            .map(|(i, b)| (format!("stem.{i}.bn"), &mut b.bn))
            .collect();
        if let Some(norms) = self.msconv.as_mut().and_then(|m| m.norms.as_mut()) {
            out.extend(norms.iter_mut().enumerate().map(|(i, bn)| (format!("msconv.bn{i}"), bn)));
        }
        out
    }

    /// Every parameter followed by every running statistic, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<_> = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (name, bn) in self.batchnorms() {
            let n = bn.channels;
            out.push((
                format!("{name}.running_mean"),
                Tensor::new(&[n], bn.running_mean.clone()).expect("channel count"),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::new(&[n], bn.running_var.clone()).expect("channel count"),
            ));
        }
        out
    }

    /// Writes `checkpoint.rtf` (concatenated RTF records) and `checkpoint.json`
    /// (config plus name → byte offset index) into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in self.named_tensors() {
            entries.push(CheckpointEntry {
                name,
                offset: blob.len() as u64,
                bytes: t.rtf_len(),
                shape: t.shape().to_vec(),
            });
            blob.extend_from_slice(&t.to_rtf_bytes());
        }
        let index = CheckpointIndex {
            config: self.config.clone(),
            blob: CHECKPOINT_BLOB.to_string(),
            tensors: entries,
        };
        let blob_path = dir.join(CHECKPOINT_BLOB);
        fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
        let index_path = dir.join(CHECKPOINT_INDEX);
        let json = serde_json::to_string_pretty(&index)?;
        fs::write(&index_path, json + "\n").map_err(|e| Error::io(&index_path, e))
    }

    /// Loads a checkpoint directory (or its `checkpoint.json`).
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let index_path: PathBuf = if path.is_dir() { path.join(CHECKPOINT_INDEX) } else { path.to_path_buf() };
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: CheckpointIndex = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: index_path.clone(),
            reason: e.to_string(),
        })?;
        let dir = index_path.parent().unwrap_or(Path::new("."));
        let blob_path = dir.join(&index.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let mut model = MimsModel::build(&index.config)?;
        let expected = model.named_tensors().len();
        if index.tensors.len() != expected {
            return Err(Error::Format {
                path: index_path,
                reason: format!("{} tensors indexed, model has {expected}", index.tensors.len()),
            });
        }
        for e in &index.tensors {
            let start = e.offset as usize;
            let end = start + e.bytes as usize;
            if end > blob.len() {
                return Err(Error::Truncated {
                    path: blob_path.clone(),
                    expected: end as u64,
                    found: blob.len() as u64,
                });
            }
            let (t, _) = Tensor::from_rtf_bytes(&blob[start..end], &blob_path)?;
            model.set_named(&e.name, t).map_err(|err| Error::Format {
                path: index_path.clone(),
                reason: err.to_string(),
            })?;
        }
        Ok(model)
    }

    fn set_named(&mut self, name: &str, t: Tensor) -> Result<()> {
        if let Some(id) = self.params.find(name) {
            return self.params.set_value(id, t);
        }
        for (bn_name, bn) in self.batchnorms_mut() {
            let target = if name == format!("{bn_name}.running_mean") {
                &mut bn.running_mean
            } else if name == format!("{bn_name}.running_var") {
                &mut bn.running_var
            } else {
                continue;
            };
            if t.numel() != target.len() {
                return Err(Error::invalid(format!("`{name}` has {} values, expected {}", t.numel(), target.len())));
            }
            *target = t.to_vec();
            return Ok(());
        }
        Err(Error::invalid(format!("unknown tensor `{name}`")))
    }
}

pub const CHECKPOINT_BLOB: &str = "checkpoint.rtf";
pub const CHECKPOINT_INDEX: &str = "checkpoint.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    offset: u64,
    bytes: u64,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    config: ExperimentConfig,
    blob: String,
    tensors: Vec<CheckpointEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;

    fn small_config(variant: Variant, pool: PoolScheme) -> ExperimentConfig {
        ExperimentConfig {
            variant,
            pool,
            stem_channels: vec![4, 6],
            ..ExperimentConfig::default()
        }
    }

    fn bag(n: usize, seed: usize) -> Bag {
        let instances = (0..n)
            .map(|i| Tensor::from_fn(&[1, 24, 24], |j| (((j + 7 * i + seed) * 2654435761) % 1000) as Real / 1000.0).unwrap())
            .collect();
        Bag::new(format!("b{seed}"), instances, 1).unwrap()
    }

    #[test]
    fn bag_validation() {
        assert!(Bag::new("e", vec![], 0).is_err());
        let a = Tensor::ones(&[1, 4, 4]).unwrap();
        let b = Tensor::ones(&[1, 5, 4]).unwrap();
        assert!(Bag::new("m", vec![a.clone(), b], 0).is_err());
        assert!(Bag::new("l", vec![a], 2).is_err());
    }

    #[test]
    fn batched_eval_matches_bag_by_bag() {
        for (variant, pool) in [
            (Variant::Mims, PoolScheme::TopK),
            (Variant::PyramidInput, PoolScheme::Mean),
            (Variant::Mims, PoolScheme::MaxInst),
        ] {
            let model = MimsModel::build(&small_config(variant, pool)).unwrap();
            let bags = [bag(2, 1), bag(3, 5), bag(1, 9)];
            let refs: Vec<&Bag> = bags.iter().collect();
            let mut g = Graph::new();
            let out = model.forward_batch(&mut g, &refs, Mode::Eval).unwrap();
            for (b, &logit) in bags.iter().zip(&out.logits) {
                let single = model.logit(b).unwrap();
                assert!((g.value(logit).item().unwrap() - single).abs() < 1e-5, "{variant:?} {pool:?}");
            }
        }
    }

    #[test]
    fn variant_parameter_audit() {
        let mims = MimsModel::build(&small_config(Variant::Mims, PoolScheme::TopK)).unwrap();
        let si = MimsModel::build(&small_config(Variant::SiCnn, PoolScheme::TopK)).unwrap();
        let pre = MimsModel::build(&small_config(Variant::MiPre, PoolScheme::TopK)).unwrap();
        assert_eq!(mims.msconv.as_ref().unwrap().config.scales.len(), 3);
        assert_eq!(mims.msconv.as_ref().unwrap().kernels.len(), 2);
        assert_eq!(pre.msconv_param_count(), 0);
        // c_in = 6, N = 18, m = 3
        let kernels = 4 * 6 * 8 + 9 * 6 * 10;
        assert_eq!(mims.msconv_param_count(), kernels + 2 * 3 * 18 + 3 * 18);
        assert_eq!(si.msconv_param_count(), kernels + 18);
        assert_eq!(
            mims.msconv_param_count() - (2 * 3 * 18 + 3 * 18),
            si.msconv_param_count() - 18
        );
    }

    #[test]
    fn permuting_instances_keeps_the_logit() {
        for pool in [PoolScheme::TopK, PoolScheme::Mean, PoolScheme::Max, PoolScheme::MaxInst, PoolScheme::PatchclsMean] {
            let model = MimsModel::build(&small_config(Variant::Mims, pool)).unwrap();
            let b = bag(3, 1);
            let mut rev = b.clone();
            rev.instances.reverse();
            let (x, y) = (model.logit(&b).unwrap(), model.logit(&rev).unwrap());
            assert!((x - y).abs() < 1e-5, "{pool}: {x} vs {y}");
        }
    }

    #[test]
    fn duplicated_instances_do_not_change_max_logit() {
        let mut cfg = small_config(Variant::Mims, PoolScheme::Max);
        let single = bag(1, 4);
        let mut dup = single.clone();
        dup.instances.push(single.instances[0].clone());
        let model = MimsModel::build(&cfg).unwrap();
        assert_eq!(model.logit(&single).unwrap(), model.logit(&dup).unwrap());
        cfg.pool = PoolScheme::TopK;
        cfg.k = 1;
        let model = MimsModel::build(&cfg).unwrap();
        assert_eq!(model.logit(&single).unwrap(), model.logit(&dup).unwrap());
    }

    #[test]
    fn instancewise_single_instance_matches_bag() {
        let model = MimsModel::build(&small_config(Variant::Mims, PoolScheme::TopK)).unwrap();
        let b = bag(1, 9);
        let probs = model.forward_instancewise(&b).unwrap();
        assert_eq!(probs.len(), 1);
        assert_eq!(probs[0], model.predict(&b).unwrap());
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = small_config(Variant::Mims, PoolScheme::TopK);
        let a = MimsModel::build(&cfg).unwrap();
        let b = MimsModel::build(&cfg).unwrap();
        let x = bag(2, 3);
        assert_eq!(a.logit(&x).unwrap().to_bits(), b.logit(&x).unwrap().to_bits());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = MimsModel::build(&small_config(Variant::Mims, PoolScheme::TopK)).unwrap();
        model.stem.blocks[0].bn.running_mean[1] = 0.25;
        model.save_checkpoint(dir.path()).unwrap();
        let back = MimsModel::load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.named_tensors(), model.named_tensors());
        let b = bag(2, 5);
        assert_eq!(back.logit(&b).unwrap(), model.logit(&b).unwrap());
    }

    #[test]
    fn taps_and_unknown_layer() {
        let model = MimsModel::build(&small_config(Variant::Mims, PoolScheme::TopK)).unwrap();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &bag(2, 0), Mode::Eval).unwrap();
        assert_eq!(g.value(out.tap("primary").unwrap()).shape(), &[2, 6, 6, 6]);
        assert_eq!(g.value(out.tap("stem.0").unwrap()).shape(), &[2, 4, 12, 12]);
        assert!(matches!(out.tap("fc7"), Err(Error::UnknownLayer(_))));
        assert_eq!(g.value(out.feature).shape(), &[18]);
    }

    #[test]
    fn pyramid_variant_runs() {
        let model = MimsModel::build(&small_config(Variant::PyramidInput, PoolScheme::TopK)).unwrap();
        assert_eq!(model.feature_width(), 6);
        assert!(model.logit(&bag(2, 2)).unwrap().is_finite());
    }
}
