//! Layer primitives recorded on a [`Graph`]: convolution, resize, batch
//! normalization, pooling, affine maps and the logistic loss.

pub mod batchnorm;
pub mod conv;
pub(crate) mod gemm;
pub mod resize;

pub use batchnorm::{BatchNorm2d, BatchStats, BnStats, Mode};
pub use conv::ConvGeom;
pub use resize::{resize_tensor, scaled_extent};

use crate::autodiff::{shape_err, sigmoid, Adjoints, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

impl Graph {
    /// 2×2 max pooling with stride 2 over the trailing axes (floor extents).
    /// Ties go to the first element of the window in row-major order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 4 || t.shape()[2] < 2 || t.shape()[3] < 2 {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "max_pool2 expects [b, ch, h>=2, w>=2]".into(),
            });
        }
        let (planes, h, w) = (t.shape()[0] * t.shape()[1], t.shape()[2], t.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        let d = t.data();
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_i = base + 2 * oy * w + 2 * ox;
                    let mut best = d[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if d[i] > best {
                            best = d[i];
                            best_i = i;
                        }
                    }
                    out.push(best);
                    argmax.push(best_i as u32);
                }
            }
        }
        let shape = vec![t.shape()[0], t.shape()[1], oh, ow];
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxPool2 { x, argmax }))
    }

    /// Multiplies channel `c` of `x [b, ch, ...]` by `s[offset + c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var, offset: usize) -> Result<Var> {
        let (xt, st) = (self.value(x), self.value(s));
        if xt.ndim() < 2 || st.numel() < offset + xt.shape()[1] {
            return Err(shape_err("channel_scale", xt, st));
        }
        let (b, ch) = (xt.shape()[0], xt.shape()[1]);
        let inner = xt.numel() / (b * ch);
        let mut out = xt.to_vec();
        for n in 0..b {
            for c in 0..ch {
                let f = st.data()[offset + c];
                let start = (n * ch + c) * inner;
                out[start..start + inner].iter_mut().for_each(|v| *v *= f);
            }
        }
        let t = Tensor::from_parts(xt.shape().to_vec(), out);
        Ok(self.push(t, Op::ChannelScale { x, s, offset }))
    }

    /// Affine map `x [b, n] · w [n, m] + bias [m]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        if xt.ndim() != 2 || wt.ndim() != 2 || xt.shape()[1] != wt.shape()[0] {
            return Err(shape_err("fully_connected", xt, wt));
        }
        let (rows, n, m) = (xt.shape()[0], wt.shape()[0], wt.shape()[1]);
        if bt.shape() != [m] {
            return Err(shape_err("fully_connected", wt, bt));
        }
        let mut out = vec![0.0; rows * m];
        gemm::gemm(rows, n, m, xt.data(), false, wt.data(), false, &mut out, false);
        for row in out.chunks_exact_mut(m) {
            row.iter_mut().zip(bt.data()).for_each(|(v, b)| *v += b);
        }
        Ok(self.push(Tensor::from_parts(vec![rows, m], out), Op::Linear { x, w, b }))
    }

    /// Mean logistic loss over the batch, in the overflow-free form
    /// `max(z, 0) - z·y + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[Real]) -> Result<Var> {
        let z = self.value(logits);
        if z.numel() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: z.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid("bce_with_logits: labels must be 0 or 1"));
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(labels)
            .map(|(&zi, &yi)| (zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p()) as f64)
            .sum();
        let loss = (total / labels.len() as f64) as Real;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                z: logits,
                labels: labels.to_vec(),
            },
        ))
    }
}

pub(crate) fn channel_scale_backward(x: Var, s: Var, offset: usize, g: &[Real], adj: &mut Adjoints) {
    let xt = adj.value(x).clone();
    let st = adj.value(s).clone();
    let (b, ch) = (xt.shape()[0], xt.shape()[1]);
    let inner = xt.numel() / (b * ch);
    if let Some(ds) = adj.slot(s) {
        for n in 0..b {
            for c in 0..ch {
                let start = (n * ch + c) * inner;
                let dot: f64 = (start..start + inner).map(|i| (g[i] * xt.data()[i]) as f64).sum();
                ds[offset + c] += dot as Real;
            }
        }
    }
    if let Some(dx) = adj.slot(x) {
        for n in 0..b {
            for c in 0..ch {
                let f = st.data()[offset + c];
                let start = (n * ch + c) * inner;
                for i in start..start + inner {
                    dx[i] += g[i] * f;
                }
            }
        }
    }
}

pub(crate) fn linear_backward(x: Var, w: Var, b: Var, g: &[Real], adj: &mut Adjoints) {
    let xt = adj.value(x).clone();
    let wt = adj.value(w).clone();
    let (rows, n, m) = (xt.shape()[0], wt.shape()[0], wt.shape()[1]);
    if let Some(db) = adj.slot(b) {
        for row in g.chunks_exact(m) {
            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
        }
    }
    if let Some(dw) = adj.slot(w) {
        gemm::gemm(n, rows, m, xt.data(), true, g, false, dw, true);
    }
    if let Some(dx) = adj.slot(x) {
        gemm::gemm(rows, m, n, g, false, wt.data(), true, dx, true);
    }
}

/// Logistic function, exposed for callers that score logits outside a graph.
pub fn logistic(z: Real) -> Real {
    sigmoid(z)
}
