//! Multiple-instance pooling.
//!
//! Every activation of channel `j` (over all instances, scales and spatial
//! positions) forms one pooling domain that collapses to a single value.
//! Top-k pooling takes a weighted average of the `k` largest activations in
//! the domain. Its weights are the normalized exponential of free logits, so
//! they stay on the probability simplex under unconstrained gradient steps.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Adjoints, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::msconv::ScaledFeatureMaps;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_DECAY: Real = 1.0;

/// Which axes collapse into one value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolDomain {
    /// Spatial positions of a single 2D map.
    PerChannelAcrossXy,
    /// Spatial positions, instances (slices) and scales together.
    PerChannelAcrossXyzAndScales,
}

/// Embedding-level aggregation applied to each channel's pooling domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Max,
    TopK,
}

/// Learnable top-k pooling weights.
#[derive(Clone, Debug)]
pub struct TopKPool {
    pub k: usize,
    pub logits: ParamId,
    pub decay: Real,
}

impl TopKPool {
    /// Registers `k` logits initialized to `-decay·r`, so the normalized
    /// weights start proportional to `exp(-decay·r)` for rank `r = 0..k`.
    pub fn new(store: &mut ParamStore, name: &str, k: usize, decay: Real) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("top-k pooling needs k >= 1".into()));
        }
        let logits = Tensor::from_fn(&[k], |r| -decay * r as Real)?;
        Ok(TopKPool {
            k,
            logits: store.add(format!("{name}.logits"), logits, 1.0)?,
            decay,
        })
    }

    /// Current normalized weights `w_1..w_k`.
    pub fn weights(&self, store: &ParamStore) -> Vec<Real> {
        softmax(store.value(self.logits).data())
    }

    /// The weight vector as a graph node (softmax of the logits).
    pub fn weights_var(&self, g: &mut Graph, store: &ParamStore) -> Var {
        let logits = g.param(store, self.logits);
        g.softmax(logits)
    }

    /// Top-k pooling of every element of `values` into one scalar.
    pub fn pool(&self, g: &mut Graph, store: &ParamStore, values: &[Var]) -> Result<Var> {
        let w = self.weights_var(g, store);
        g.topk_pool(values, w)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Candidate {
    value: Real,
    input: u32,
    flat: u32,
}

/// Descending by value; ties resolved by earliest input, then flat index.
fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.value
        .partial_cmp(&a.value)
        .unwrap_or(Ordering::Equal)
        .then(a.input.cmp(&b.input))
        .then(a.flat.cmp(&b.flat))
}

fn select_top(mut cands: Vec<Candidate>, k: usize) -> Vec<Candidate> {
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, rank_order);
        cands.truncate(k);
    }
    cands.sort_by(rank_order);
    cands
}

/// Selected elements of one top-k domain plus the renormalization used.
#[derive(Debug, Clone)]
pub(crate) struct TopKSaved {
    selected: Vec<Candidate>,
    denom: Real,
    out: Real,
}

/// Applies the first `selected.len()` weights renormalized to sum one.
fn weighted_top(selected: Vec<Candidate>, w: &[Real]) -> TopKSaved {
    let kk = selected.len();
    let denom: f64 = w[..kk].iter().map(|&v| v as f64).sum();
    let acc: f64 = selected
        .iter()
        .zip(w)
        .map(|(c, &wr)| c.value as f64 * wr as f64)
        .sum();
    TopKSaved {
        selected,
        denom: denom as Real,
        out: (acc / denom) as Real,
    }
}

fn topk_grads(saved: &TopKSaved, gout: Real, w: &[Real], dw: Option<&mut [Real]>, mut da: impl FnMut(&Candidate, Real)) {
    for (r, c) in saved.selected.iter().enumerate() {
        da(c, gout * w[r] / saved.denom);
    }
    if let Some(dw) = dw {
        for (r, c) in saved.selected.iter().enumerate() {
            dw[r] += gout * (c.value - saved.out) / saved.denom;
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum ChannelPoolSaved {
    Mean(Vec<usize>),
    Max(Vec<Candidate>),
    TopK(Vec<TopKSaved>),
}

impl TopKSaved {
    /// Feeds the ranked selection into `h`.
    pub(crate) fn hash_selection<H: std::hash::Hasher>(&self, h: &mut H) {
        for c in &self.selected {
            h.write_u32(c.input);
            h.write_u32(c.flat);
        }
    }
}

impl ChannelPoolSaved {
    pub(crate) fn hash_selection<H: std::hash::Hasher>(&self, h: &mut H) {
        match self {
            ChannelPoolSaved::Mean(_) => {}
            ChannelPoolSaved::Max(cands) => {
                for c in cands {
                    h.write_u32(c.input);
                    h.write_u32(c.flat);
                }
            }
            ChannelPoolSaved::TopK(saved) => saved.iter().for_each(|s| s.hash_selection(h)),
        }
    }
}

impl Graph {
    /// `Σ_r w_r·a_r` over the `k' = min(k, M)` largest elements `a_1 ≥ a_2 ≥ …`
    /// of all `values`, with the first `k'` weights renormalized to sum one.
    pub fn topk_pool(&mut self, values: &[Var], weights: Var) -> Result<Var> {
        if values.is_empty() {
            return Err(Error::invalid("topk_pool: empty input list"));
        }
        let w = self.value(weights).to_vec();
        if w.is_empty() || self.value(weights).ndim() != 1 {
            return Err(Error::invalid("topk_pool: weights must be a non-empty vector"));
        }
        let mut cands = Vec::new();
        for (i, &v) in values.iter().enumerate() {
            cands.extend(self.value(v).data().iter().enumerate().map(|(f, &value)| Candidate {
                value,
                input: i as u32,
                flat: f as u32,
            }));
        }
        let saved = weighted_top(select_top(cands, w.len()), &w);
        let out = Tensor::scalar(saved.out);
        Ok(self.push(
            out,
            Op::TopK {
                inputs: values.to_vec(),
                weights,
                saved,
            },
        ))
    }

    /// Pools each channel of a set of `[b, c, ...]` maps into one value.
    /// `inputs` pairs each map with the global index of its first channel;
    /// the result has shape `[channels]`.
    pub fn channel_pool(
        &mut self,
        inputs: &[(Var, usize)],
        channels: usize,
        kind: PoolKind,
        weights: Option<Var>,
    ) -> Result<Var> {
        let w = match (kind, weights) {
            (PoolKind::TopK, Some(w)) => self.value(w).to_vec(),
            (PoolKind::TopK, None) => return Err(Error::invalid("channel_pool: top-k needs weights")),
            _ => Vec::new(),
        };
        let mut domains: Vec<Vec<Candidate>> = vec![Vec::new(); channels];
        for (i, &(v, offset)) in inputs.iter().enumerate() {
            let t = self.value(v);
            if t.ndim() < 2 || offset + t.shape()[1] > channels {
                return Err(Error::InvalidShape {
                    shape: t.shape().to_vec(),
                    reason: format!("channels {offset}.. exceed pooled width {channels}"),
                });
            }
            let (b, c) = (t.shape()[0], t.shape()[1]);
            let inner = t.numel() / (b * c);
            for n in 0..b {
                for cl in 0..c {
                    let start = (n * c + cl) * inner;
                    domains[offset + cl].extend(t.data()[start..start + inner].iter().enumerate().map(
                        |(r, &value)| Candidate {
                            value,
                            input: i as u32,
                            flat: (start + r) as u32,
                        },
                    ));
                }
            }
        }
        if let Some(j) = domains.iter().position(|d| d.is_empty()) {
            return Err(Error::invalid(format!("channel_pool: channel {j} has no activations")));
        }
        let (out, saved) = match kind {
            PoolKind::Mean => {
                let out = domains
                    .iter()
                    .map(|d| (d.iter().map(|c| c.value as f64).sum::<f64>() / d.len() as f64) as Real)
                    .collect();
                (out, ChannelPoolSaved::Mean(domains.iter().map(Vec::len).collect()))
            }
            PoolKind::Max => {
                let best: Vec<Candidate> = domains.into_iter().map(|d| select_top(d, 1)[0]).collect();
                (best.iter().map(|c| c.value).collect(), ChannelPoolSaved::Max(best))
            }
            PoolKind::TopK => {
                let saved: Vec<TopKSaved> = domains
                    .into_iter()
                    .map(|d| weighted_top(select_top(d, w.len()), &w))
                    .collect();
                (saved.iter().map(|s| s.out).collect(), ChannelPoolSaved::TopK(saved))
            }
        };
        let weights = if kind == PoolKind::TopK { weights } else { None };
        Ok(self.push(
            Tensor::from_parts(vec![channels], out),
            Op::ChannelPool {
                inputs: inputs.to_vec(),
                weights,
                saved,
            },
        ))
    }
}

pub(crate) fn topk_backward(inputs: &[Var], weights: Var, saved: &TopKSaved, g: &[Real], adj: &mut Adjoints) {
    let w = adj.value(weights).to_vec();
    let mut contributions = Vec::with_capacity(saved.selected.len());
    {
        let dw = adj.slot(weights);
        topk_grads(saved, g[0], &w, dw, |c, v| contributions.push((c.input, c.flat, v)));
    }
    for (input, flat, v) in contributions {
        if let Some(d) = adj.slot(inputs[input as usize]) {
            d[flat as usize] += v;
        }
    }
}

pub(crate) fn channel_pool_backward(
    inputs: &[(Var, usize)],
    weights: Option<Var>,
    saved: &ChannelPoolSaved,
    g: &[Real],
    adj: &mut Adjoints,
) {
    match saved {
        ChannelPoolSaved::Mean(counts) => {
            for &(v, offset) in inputs {
                let shape = adj.value(v).shape().to_vec();
                let (b, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                if let Some(d) = adj.slot(v) {
                    for n in 0..b {
                        for cl in 0..c {
                            let gv = g[offset + cl] / counts[offset + cl] as Real;
                            let start = (n * c + cl) * inner;
                            d[start..start + inner].iter_mut().for_each(|x| *x += gv);
                        }
                    }
                }
            }
        }
        ChannelPoolSaved::Max(best) => {
            for (j, c) in best.iter().enumerate() {
                if let Some(d) = adj.slot(inputs[c.input as usize].0) {
                    d[c.flat as usize] += g[j];
                }
            }
        }
        ChannelPoolSaved::TopK(per_channel) => {
            let wv = weights.expect("top-k pooling records its weights");
            let w = adj.value(wv).to_vec();
            let mut dw_total = vec![0.0; w.len()];
            let mut contributions = Vec::new();
            for (j, s) in per_channel.iter().enumerate() {
                topk_grads(s, g[j], &w, Some(&mut dw_total), |c, v| {
                    contributions.push((c.input, c.flat, v))
                });
            }
            if let Some(dw) = adj.slot(wv) {
                dw.iter_mut().zip(&dw_total).for_each(|(a, b)| *a += b);
            }
            for (input, flat, v) in contributions {
                if let Some(d) = adj.slot(inputs[input as usize].0) {
                    d[flat as usize] += v;
                }
            }
        }
    }
}

/// Pools the secondary maps of one or more instance batches into a bag
/// feature `[N]`: channel `j` aggregates every scale, instance and position.
pub fn pool_bag(
    g: &mut Graph,
    store: &ParamStore,
    features: &[&ScaledFeatureMaps],
    kind: PoolKind,
    pool: Option<&TopKPool>,
) -> Result<Var> {
    let first = features
        .first()
        .ok_or_else(|| Error::invalid("pool_bag: no instances"))?;
    let channels = first.channels;
    let mut inputs = Vec::new();
    for f in features {
        if f.channels != channels {
            return Err(Error::invalid(format!(
                "pool_bag: channel count mismatch ({} vs {channels})",
                f.channels
            )));
        }
        inputs.extend(f.pool_inputs());
    }
    let weights = match kind {
        PoolKind::TopK => {
            let pool = pool.ok_or_else(|| Error::invalid("pool_bag: top-k scheme needs a TopKPool"))?;
            Some(pool.weights_var(g, store))
        }
        _ => None,
    };
    g.channel_pool(&inputs, channels, kind, weights)
}

/// Instance-level MIL: the bag probability is the largest instance probability.
pub fn max_inst_aggregate(instance_probs: &[Real]) -> Result<Real> {
    instance_probs
        .iter()
        .copied()
        .reduce(Real::max)
        .ok_or_else(|| Error::invalid("max_inst_aggregate: empty list"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(g: &mut Graph, w: &[Real]) -> Var {
        g.variable(Tensor::from_vec(w.to_vec()).unwrap())
    }

    #[test]
    fn two_of_three_with_fixed_weights() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![5.0, 3.0, 1.0]).unwrap());
        let w = weights(&mut g, &[0.7, 0.3]);
        let y = g.topk_pool(&[x], w).unwrap();
        assert!((g.value(y).item().unwrap() - 4.4).abs() < 1e-6);
        g.backward(y).unwrap();
        let dx = g.grad(x).unwrap();
        assert!((dx.data()[0] - 0.7).abs() < 1e-6 && (dx.data()[1] - 0.3).abs() < 1e-6);
        assert_eq!(dx.data()[2], 0.0);
    }

    #[test]
    fn k_one_is_global_max() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![0.5, -2.0]).unwrap());
        let b = g.constant(Tensor::from_vec(vec![1.5, 1.0, 0.0]).unwrap());
        let w = weights(&mut g, &[1.0]);
        let y = g.topk_pool(&[a, b], w).unwrap();
        assert_eq!(g.value(y).item().unwrap(), 1.5);
    }

    #[test]
    fn fewer_elements_than_k_renormalizes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![2.0, 4.0]).unwrap());
        let w = weights(&mut g, &[0.5, 0.25, 0.25]);
        let y = g.topk_pool(&[x], w).unwrap();
        // (0.5·4 + 0.25·2) / 0.75
        assert!((g.value(y).item().unwrap() - 10.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn ties_resolve_to_earliest_tensor() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::from_vec(vec![1.0, 3.0]).unwrap());
        let b = g.variable(Tensor::from_vec(vec![3.0]).unwrap());
        let w = weights(&mut g, &[1.0]);
        let y = g.topk_pool(&[a, b], w).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.0, 1.0]);
        let gb = g.grad(b).map(|t| t.to_vec()).unwrap_or(vec![0.0]);
        assert_eq!(gb, vec![0.0]);
    }

    #[test]
    fn empty_input_is_an_error() {
        let mut g = Graph::new();
        let w = weights(&mut g, &[1.0]);
        assert!(g.topk_pool(&[], w).is_err());
        assert!(max_inst_aggregate(&[]).is_err());
    }

    #[test]
    fn initial_weights_decay_exponentially() {
        let mut store = ParamStore::new();
        let pool = TopKPool::new(&mut store, "pool", 5, 1.0).unwrap();
        let w = pool.weights(&store);
        assert!((w.iter().sum::<Real>() - 1.0).abs() < 1e-6);
        for r in 1..5 {
            assert!((w[r] / w[r - 1] - (-1.0 as Real).exp()).abs() < 1e-5);
        }
    }

    #[test]
    fn max_inst_examples() {
        assert_eq!(max_inst_aggregate(&[0.2, 0.9, 0.4]).unwrap(), 0.9);
        assert_eq!(max_inst_aggregate(&[0.3]).unwrap(), 0.3);
    }

    #[test]
    fn channel_pool_constant_maps() {
        for kind in [PoolKind::Mean, PoolKind::Max, PoolKind::TopK] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::full(&[1, 2, 3, 3], 0.75).unwrap());
            let w = (kind == PoolKind::TopK).then(|| weights(&mut g, &[0.6, 0.3, 0.1]));
            let y = g.channel_pool(&[(x, 0)], 2, kind, w).unwrap();
            assert!(g.value(y).data().iter().all(|&v| (v - 0.75).abs() < 1e-6));
        }
    }

    #[test]
    fn channel_pool_requires_full_coverage() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 2, 2, 2]).unwrap());
        assert!(g.channel_pool(&[(x, 0)], 3, PoolKind::Mean, None).is_err());
        assert!(g.channel_pool(&[(x, 2)], 3, PoolKind::Mean, None).is_err());
    }
}
