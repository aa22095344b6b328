use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::auroc;
use super::par_map;
use crate::autodiff::Graph;
use crate::config::{ExperimentConfig, OptimizerKind};
use crate::data::{scale_bin, Dataset, SCALE_BINS};
use crate::error::{Error, Result};
use crate::model::{Bag, MimsModel};
use crate::nn::Mode;
use crate::optim::{Adam, Optimizer, Sgd};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinAuroc {
    pub lo: f64,
    pub hi: f64,
    pub positives: usize,
    /// Positives of this bin against all negatives.
    pub auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub pool: String,
    pub k: usize,
    pub seed: u64,
    pub epochs: usize,
    pub auroc: f64,
    pub per_scale_bin: Vec<BinAuroc>,
    pub param_count: usize,
    pub msconv_param_count: usize,
    /// Mean training loss of every epoch.
    pub train_loss: Vec<f64>,
    /// Seconds spent training and evaluating; omitted from files so that
    /// reruns stay byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

pub struct TrainOutcome {
    pub model: MimsModel,
    pub report: MetricsReport,
}

/// Eval-mode logits of every bag, in order.
pub fn score_bags(model: &MimsModel, bags: &[Bag]) -> Result<Vec<f64>> {
    par_map(bags.len(), |i| model.logit(&bags[i]).map(|v| v as f64))
        .into_iter()
        .collect()
}

/// Test AUROC overall and per ROI-scale bin (when ground truth is present).
pub fn evaluate(model: &MimsModel, test: &Dataset) -> Result<(f64, Vec<BinAuroc>)> {
    let scores = score_bags(model, &test.bags)?;
    let labels: Vec<u8> = test.bags.iter().map(|b| b.label).collect();
    let overall = auroc(&scores, &labels)?;
    let mut bins = Vec::new();
    if let Some(truth) = &test.truth {
        for (bin, &(lo, hi)) in SCALE_BINS.iter().enumerate() {
            let mut s = Vec::new();
            let mut l = Vec::new();
            for (bag, &score) in test.bags.iter().zip(&scores) {
                let keep = match bag.label {
                    0 => true,
                    _ => truth.get(&bag.id).and_then(|t| t.scale).and_then(scale_bin) == Some(bin),
                };
                if keep {
                    s.push(score);
                    l.push(bag.label);
                }
            }
            let positives = l.iter().filter(|&&x| x == 1).count();
            bins.push(BinAuroc {
                lo,
                hi,
                positives,
                auroc: auroc(&s, &l).ok(),
            });
        }
    }
    Ok((overall, bins))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::data::rng::derive_key(seed, epoch as u64))
}

/// Mini-batch training on bag labels only. Each batch of `batch_bags` bags
/// runs as one train-mode graph whose batchnorm layers normalize over every
/// instance of the batch; the mean bag loss is backpropagated, the optimizer
/// takes one step and the batch statistics update the running estimates.
pub fn train_model(config: &ExperimentConfig, train: &Dataset) -> Result<(MimsModel, Vec<f64>)> {
    train_model_with(config, train, |_, _| {})
}

/// [`train_model`] with a callback receiving `(epoch, mean loss)`.
pub fn train_model_with(
    config: &ExperimentConfig,
    train: &Dataset,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(MimsModel, Vec<f64>)> {
    if train.bags.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut model = MimsModel::build(config)?;
    let mut opt: Box<dyn Optimizer> = match config.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(config.lr, 0.9, 0.999, 1e-8)),
        OptimizerKind::Sgd => Box::new(Sgd { lr: config.lr }),
    };
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.bags.len()).collect();
        order.shuffle(&mut epoch_rng(config.seed, epoch));
        let mut total = 0.0f64;
        for batch in order.chunks(config.batch_bags) {
            let bags: Vec<&Bag> = batch.iter().map(|&i| &train.bags[i]).collect();
            model.params.zero_grads();
            let mut g = Graph::new();
            let out = model.forward_batch(&mut g, &bags, Mode::Train)?;
            let mut losses_in_batch = Vec::with_capacity(bags.len());
            for (bag, &logit) in bags.iter().zip(&out.logits) {
                let loss = g.bce_with_logits(logit, &[bag.label as Real])?;
                total += g.value(loss).item()? as f64;
                losses_in_batch.push(loss);
            }
            let stacked = g.concat(&losses_in_batch, 0)?;
            let loss = g.mean(stacked);
            g.backward(loss)?;
            model.params.accumulate_grads(&g.param_grads())?;
            let updates = out.bn_updates;
            opt.step(&mut model.params)?;
            model.apply_bn_updates(&updates);
        }
        let mean = total / train.bags.len() as f64;
        on_epoch(epoch, mean);
        losses.push(mean);
    }
    Ok((model, losses))
}

/// Trains on `train`, evaluates on `test` and assembles the report.
pub fn train(config: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
    train_with(config, train, test, |_, _| {})
}

pub fn train_with(
    config: &ExperimentConfig,
    train_set: &Dataset,
    test: &Dataset,
    on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let (model, train_loss) = train_model_with(config, train_set, on_epoch)?;
    let (auroc, per_scale_bin) = evaluate(&model, test)?;
    let report = MetricsReport {
        variant: config.variant.name().to_string(),
        pool: config.pool.name().to_string(),
        k: config.k,
        seed: config.seed,
        epochs: config.epochs,
        auroc,
        per_scale_bin,
        param_count: model.param_count(),
        msconv_param_count: model.msconv_param_count(),
        train_loss,
        wall_time_s: Some(start.elapsed().as_secs_f64()),
    };
    Ok(TrainOutcome { model, report })
}
