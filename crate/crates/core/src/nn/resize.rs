//! Bilinear resize with half-pixel centers.
//!
//! Output index `d` along an axis samples the source coordinate
//! `s = (d + 0.5) / scale - 0.5`, clamped to `[0, size - 1]`, and blends its
//! two neighbours. Output extents are `round_half_up(size * scale)`.

use crate::autodiff::{Adjoints, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Interpolation taps for one axis: `(lower, upper, upper_weight)` per output index.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AxisTaps(Vec<(usize, usize, Real)>);

impl AxisTaps {
    fn new(in_size: usize, out_size: usize, scale: f64) -> Self {
        let last = (in_size - 1) as f64;
        AxisTaps(
            (0..out_size)
                .map(|d| {
                    let s = ((d as f64 + 0.5) / scale - 0.5).clamp(0.0, last);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(in_size - 1);
                    (i0, i1, (s - i0 as f64) as Real)
                })
                .collect(),
        )
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ResizePlan {
    planes: usize,
    in_h: usize,
    in_w: usize,
    rows: AxisTaps,
    cols: AxisTaps,
}

/// `round_half_up(size * scale)`.
pub fn scaled_extent(size: usize, scale: f64) -> usize {
    (size as f64 * scale + 0.5).floor() as usize
}

impl ResizePlan {
    fn new(shape: &[usize], out_h: usize, out_w: usize, scale_h: f64, scale_w: f64) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "resize needs at least two axes".into(),
            });
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidShape {
                shape: vec![out_h, out_w],
                reason: "resize output extent must be positive".into(),
            });
        }
        let n = shape.len();
        let (in_h, in_w) = (shape[n - 2], shape[n - 1]);
        Ok(ResizePlan {
            planes: shape[..n - 2].iter().product(),
            in_h,
            in_w,
            rows: AxisTaps::new(in_h, out_h, scale_h),
            cols: AxisTaps::new(in_w, out_w, scale_w),
        })
    }

    fn out_shape(&self, shape: &[usize]) -> Vec<usize> {
        let mut s = shape.to_vec();
        let n = s.len();
        s[n - 2] = self.rows.0.len();
        s[n - 1] = self.cols.0.len();
        s
    }

    fn forward(&self, x: &[Real]) -> Vec<Real> {
        let (oh, ow) = (self.rows.0.len(), self.cols.0.len());
        let mut out = vec![0.0; self.planes * oh * ow];
        for p in 0..self.planes {
            let src = &x[p * self.in_h * self.in_w..(p + 1) * self.in_h * self.in_w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in self.rows.0.iter().enumerate() {
                let (r0, r1) = (&src[y0 * self.in_w..], &src[y1 * self.in_w..]);
                for (ox, &(x0, x1, fx)) in self.cols.0.iter().enumerate() {
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    dst[oy * ow + ox] = top + (bottom - top) * fy;
                }
            }
        }
        out
    }

    fn backward(&self, g: &[Real], dx: &mut [Real]) {
        let (oh, ow) = (self.rows.0.len(), self.cols.0.len());
        for p in 0..self.planes {
            let gp = &g[p * oh * ow..(p + 1) * oh * ow];
            let dp = &mut dx[p * self.in_h * self.in_w..(p + 1) * self.in_h * self.in_w];
            for (oy, &(y0, y1, fy)) in self.rows.0.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.cols.0.iter().enumerate() {
                    let v = gp[oy * ow + ox];
                    let (top, bottom) = (v * (1.0 - fy), v * fy);
                    dp[y0 * self.in_w + x0] += top * (1.0 - fx);
                    dp[y0 * self.in_w + x1] += top * fx;
                    dp[y1 * self.in_w + x0] += bottom * (1.0 - fx);
                    dp[y1 * self.in_w + x1] += bottom * fx;
                }
            }
        }
    }
}

pub(crate) fn backward(x: Var, plan: &ResizePlan, g: &[Real], adj: &mut Adjoints) {
    if let Some(dx) = adj.slot(x) {
        plan.backward(g, dx);
    }
}

/// Resizes the two trailing axes of a tensor without recording a graph.
pub fn resize_tensor(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let n = x.ndim();
    if n < 2 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "resize needs at least two axes".into(),
        });
    }
    let (h, w) = (x.shape()[n - 2], x.shape()[n - 1]);
    let plan = ResizePlan::new(x.shape(), out_h, out_w, out_h as f64 / h as f64, out_w as f64 / w as f64)?;
    Ok(Tensor::from_parts(plan.out_shape(x.shape()), plan.forward(x.data())))
}

impl Graph {
    /// Bilinear resize of the two trailing axes by the given factors.
    pub fn bilinear_resize(&mut self, x: Var, scale_h: f64, scale_w: f64) -> Result<Var> {
        for s in [scale_h, scale_w] {
            if !(s > 0.0 && s <= 8.0) {
                return Err(Error::invalid(format!("resize scale {s} outside (0, 8]")));
            }
        }
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidShape {
                shape,
                reason: "resize needs at least two axes".into(),
            });
        }
        let n = shape.len();
        let out_h = scaled_extent(shape[n - 2], scale_h);
        let out_w = scaled_extent(shape[n - 1], scale_w);
        let plan = ResizePlan::new(&shape, out_h, out_w, scale_h, scale_w)?;
        self.record_resize(x, plan)
    }

    /// Bilinear resize of the two trailing axes to explicit extents.
    pub fn resize_to(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let n = shape.len();
        if n < 2 {
            return Err(Error::InvalidShape {
                shape,
                reason: "resize needs at least two axes".into(),
            });
        }
        let plan = ResizePlan::new(
            &shape,
            out_h,
            out_w,
            out_h as f64 / shape[n - 2] as f64,
            out_w as f64 / shape[n - 1] as f64,
        )?;
        self.record_resize(x, plan)
    }

    fn record_resize(&mut self, x: Var, plan: ResizePlan) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_parts(plan.out_shape(t.shape()), plan.forward(t.data()));
        Ok(self.push(out, Op::Resize { x, plan }))
    }
}
