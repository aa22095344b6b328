use serde::{Deserialize, Serialize};

use crate::autodiff::{shape_err, Adjoints, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: Real = 1e-5;
pub const BN_MOMENTUM: Real = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch statistics observed by a train-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

#[derive(Debug)]
pub(crate) struct BnSaved {
    xhat: Vec<Real>,
    inv_std: Vec<Real>,
    train: bool,
}

/// Normalization statistics source for one call.
pub enum BnStats<'a> {
    /// Normalize with the batch's own biased statistics.
    Batch,
    /// Normalize with fixed running statistics (treated as constants).
    Running { mean: &'a [Real], var: &'a [Real] },
}

/// Batch normalization over `[b, ch, h, w]`: trainable affine parameters plus
/// running statistics, which live outside the graph.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<Real>,
    pub running_var: Vec<Real>,
    pub momentum: Real,
    pub eps: Real,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, lr_scale: Real) -> Result<Self> {
        Ok(BatchNorm2d {
            channels,
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])?, lr_scale)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])?, lr_scale)?,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    /// Normalizes `x` (whose channels map onto `offset..offset + c` of this layer).
    /// Train mode returns the batch statistics so the caller can fold them into
    /// the running estimates with [`BatchNorm2d::update_running`].
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        offset: usize,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let stats = match mode {
            Mode::Train => BnStats::Batch,
            Mode::Eval => BnStats::Running {
                mean: &self.running_mean,
                var: &self.running_var,
            },
        };
        g.batchnorm(x, gamma, beta, offset, stats, self.eps)
    }

    pub fn update_running(&mut self, offset: usize, stats: &BatchStats) {
        let m = self.momentum;
        for (c, (&mean, &var)) in stats.mean.iter().zip(&stats.var).enumerate() {
            let rm = &mut self.running_mean[offset + c];
            *rm = (1.0 - m) * *rm + m * mean;
            let rv = &mut self.running_var[offset + c];
            *rv = (1.0 - m) * *rv + m * var;
        }
    }
}

impl Graph {
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        offset: usize,
        stats: BnStats<'_>,
        eps: Real,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xt = self.value(x).clone();
        if xt.ndim() != 4 {
            return Err(Error::InvalidShape {
                shape: xt.shape().to_vec(),
                reason: "batchnorm2d expects [b, ch, h, w]".into(),
            });
        }
        let (b, ch, plane) = (xt.shape()[0], xt.shape()[1], xt.shape()[2] * xt.shape()[3]);
        let gt = self.value(gamma).clone();
        let bt = self.value(beta).clone();
        if gt.numel() < offset + ch || bt.numel() != gt.numel() {
            return Err(shape_err("batchnorm2d", &xt, &gt));
        }
        let count = b * plane;
        let (mean, var, train) = match stats {
            BnStats::Batch => {
                if count < 2 {
                    return Err(Error::InvalidShape {
                        shape: xt.shape().to_vec(),
                        reason: "train-mode batchnorm needs at least two values per channel".into(),
                    });
                }
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for c in 0..ch {
                    let vals = (0..b).flat_map(|n| {
                        let start = (n * ch + c) * plane;
                        xt.data()[start..start + plane].iter().map(|&v| v as f64)
                    });
                    let m = vals.clone().sum::<f64>() / count as f64;
                    let v = vals.map(|x| (x - m) * (x - m)).sum::<f64>() / count as f64;
                    mean[c] = m as Real;
                    var[c] = v as Real;
                }
                (mean, var, true)
            }
            BnStats::Running { mean, var } => {
                if mean.len() < offset + ch || var.len() < offset + ch {
                    return Err(Error::invalid("batchnorm2d: running stats shorter than channels"));
                }
                (
                    mean[offset..offset + ch].to_vec(),
                    var[offset..offset + ch].to_vec(),
                    false,
                )
            }
        };
        let inv_std: Vec<Real> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xt.numel()];
        let mut out = vec![0.0; xt.numel()];
        for n in 0..b {
            for c in 0..ch {
                let start = (n * ch + c) * plane;
                let (ga, be) = (gt.data()[offset + c], bt.data()[offset + c]);
                for i in start..start + plane {
                    let h = (xt.data()[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = ga * h + be;
                }
            }
        }
        let out = Tensor::from_parts(xt.shape().to_vec(), out);
        let batch_stats = train.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                offset,
                saved: BnSaved { xhat, inv_std, train },
            },
        );
        Ok((v, batch_stats))
    }
}

pub(crate) fn backward(
    x: Var,
    gamma: Var,
    beta: Var,
    offset: usize,
    saved: &BnSaved,
    g: &[Real],
    adj: &mut Adjoints,
) {
    let shape = adj.value(x).shape().to_vec();
    let (b, ch, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = (b * plane) as f64;
    let gt = adj.value(gamma).clone();
    let mut sum_g = vec![0.0f64; ch];
    let mut sum_gx = vec![0.0f64; ch];
    for n in 0..b {
        for c in 0..ch {
            let start = (n * ch + c) * plane;
            for i in start..start + plane {
                sum_g[c] += g[i] as f64;
                sum_gx[c] += (g[i] * saved.xhat[i]) as f64;
            }
        }
    }
    if let Some(dg) = adj.slot(gamma) {
        for c in 0..ch {
            dg[offset + c] += sum_gx[c] as Real;
        }
    }
    if let Some(db) = adj.slot(beta) {
        for c in 0..ch {
            db[offset + c] += sum_g[c] as Real;
        }
    }
    if let Some(dx) = adj.slot(x) {
        for n in 0..b {
            for c in 0..ch {
                let start = (n * ch + c) * plane;
                let scale = gt.data()[offset + c] * saved.inv_std[c];
                if saved.train {
                    let mg = (sum_g[c] / count) as Real;
                    let mgx = (sum_gx[c] / count) as Real;
                    for i in start..start + plane {
                        dx[i] += scale * (g[i] - mg - saved.xhat[i] * mgx);
                    }
                } else {
                    for i in start..start + plane {
                        dx[i] += scale * g[i];
                    }
                }
            }
        }
    }
}
