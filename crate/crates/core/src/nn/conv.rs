//! 2D cross-correlation via im2col + GEMM.

use crate::autodiff::{shape_err, Adjoints, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::nn::gemm::gemm;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let bad = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        };
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || w[2] != w[3] {
            return Err(bad());
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        let k = w[2];
        let (h, wd) = (x[2], x[3]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::InvalidShape {
                shape: x.to_vec(),
                reason: format!("padded input smaller than kernel {k}"),
            });
        }
        Ok(ConvGeom {
            batch: x[0],
            in_ch: x[1],
            out_ch: w[0],
            h,
            w: wd,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (wd + 2 * pad - k) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Fills `cols` (`patch × positions`) for one image `x` (`in_ch × h × w`).
    fn im2col(&self, x: &[Real], cols: &mut [Real]) {
        let p = self.positions();
        for c in 0..self.in_ch {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * p;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * self.out_w..row + (oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[Real], dx: &mut [Real]) {
        let p = self.positions();
        for c in 0..self.in_ch {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * p;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        let src = &cols[row + oy * self.out_w..row + (oy + 1) * self.out_w];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, geom: &ConvGeom) -> Tensor {
    let (p, patch) = (geom.positions(), geom.patch());
    let in_len = geom.in_ch * geom.h * geom.w;
    let out_len = geom.out_ch * p;
    let mut out = vec![0.0; geom.batch * out_len];
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; patch * p] };
    for n in 0..geom.batch {
        let xin = &x.data()[n * in_len..(n + 1) * in_len];
        let cols_ref: &[Real] = if geom.is_pointwise() {
            xin
        } else {
            geom.im2col(xin, &mut cols);
            &cols
        };
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        gemm(geom.out_ch, patch, p, w.data(), false, cols_ref, false, dst, false);
        if let Some(b) = b {
            for (o, row) in dst.chunks_exact_mut(p).enumerate() {
                let bias = b.data()[o];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    Tensor::from_parts(vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w], out)
}

pub(crate) fn backward(x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, g: &[Real], adj: &mut Adjoints) {
    let (p, patch) = (geom.positions(), geom.patch());
    let in_len = geom.in_ch * geom.h * geom.w;
    let out_len = geom.out_ch * p;
    let xt = adj.value(x).clone();
    let wt = adj.value(w).clone();

    if let Some(b) = b {
        if let Some(db) = adj.slot(b) {
            for n in 0..geom.batch {
                for (o, row) in g[n * out_len..(n + 1) * out_len].chunks_exact(p).enumerate() {
                    db[o] += row.iter().map(|&v| v as f64).sum::<f64>() as Real;
                }
            }
        }
    }

    let mut cols = vec![0.0; patch * p];
    if let Some(dw) = adj.slot(w) {
        for n in 0..geom.batch {
            let xin = &xt.data()[n * in_len..(n + 1) * in_len];
            let cols_ref: &[Real] = if geom.is_pointwise() {
                xin
            } else {
                geom.im2col(xin, &mut cols);
                &cols
            };
            let gn = &g[n * out_len..(n + 1) * out_len];
            gemm(geom.out_ch, p, patch, gn, false, cols_ref, true, dw, true);
        }
    }

    if let Some(dx) = adj.slot(x) {
        for n in 0..geom.batch {
            let gn = &g[n * out_len..(n + 1) * out_len];
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if geom.is_pointwise() {
                gemm(patch, geom.out_ch, p, wt.data(), true, gn, false, dxn, true);
            } else {
                gemm(patch, geom.out_ch, p, wt.data(), true, gn, false, &mut cols, false);
                geom.col2im(&cols, dxn);
            }
        }
    }
}

impl Graph {
    /// Cross-correlation of `x [b,in,h,w]` with `w [out,in,k,k]` plus optional bias `[out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        if let Some(b) = b {
            if self.value(b).shape() != [geom.out_ch] {
                return Err(shape_err("conv2d", self.value(w), self.value(b)));
            }
        }
        let out = forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }))
    }
}
