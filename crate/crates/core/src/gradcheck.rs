//! Central finite-difference verification of backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::mil::{PoolKind, TopKPool};
use crate::model::MimsModel;
use crate::msconv::{KernelGroup, MsConvConfig, MsConvLayer};
use crate::nn::{BnStats, Mode};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    /// `‖a - n‖ / max(1e-8, ‖a‖ + ‖n‖)` where `a` and `n` stack the
    /// analytic and numeric gradients of every checked coordinate.
    pub max_rel_error: Real,
    /// Worst `|a - n| / max(1e-8, |a| + |n|)` over single coordinates. In
    /// 32-bit this is dominated by rounding for entries far below the
    /// gradient's scale.
    pub max_elem_error: Real,
    pub checked: usize,
    /// Coordinates whose ±step perturbation changed a discrete decision
    /// (relu sign, max winner, top-k selection), where the central
    /// difference does not estimate the derivative.
    pub skipped: usize,
}

/// Worst relative disagreement between analytic and central-difference
/// gradients over the inputs. See [`grad_check_report`].
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: Real) -> Result<Real>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_report(f, inputs, step).map(|r| r.max_rel_error)
}

/// Compares the reverse-mode gradient of the scalar `f` with central
/// differences `(f(x+h) - f(x-h)) / 2h` for every input coordinate,
/// skipping coordinates whose perturbation crosses a kink.
pub fn grad_check_report<F>(f: F, inputs: &[Tensor], step: Real) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("grad_check: step must be positive"));
    }
    let eval = |vals: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        Ok((g.value(y).item()? as f64, g.active_set_signature()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let base = g.active_set_signature();
    g.backward(y)?;

    let mut report = GradCheck::default();
    let mut worst_elem = 0.0f64;
    let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).map(|t| t.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let mut plus = input.to_vec();
            plus[j] += step;
            let mut minus = input.to_vec();
            minus[j] -= step;
            work[i] = Tensor::new(input.shape(), plus)?;
            let (fp, sp) = eval(&work)?;
            work[i] = Tensor::new(input.shape(), minus)?;
            let (fm, sm) = eval(&work)?;
            work[i] = input.clone();
            if sp != base || sm != base {
                report.skipped += 1;
                continue;
            }
            // The actual perturbation after rounding to the working precision.
            let h = (input.data()[j] + step) as f64 - (input.data()[j] - step) as f64;
            let numeric = (fp - fm) / h;
            let a = analytic[j] as f64;
            worst_elem = worst_elem.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8));
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            report.checked += 1;
        }
    }
    report.max_rel_error = (diff2.sqrt() / (a2.sqrt() + n2.sqrt()).max(1e-8)) as Real;
    report.max_elem_error = worst_elem as Real;
    Ok(report)
}

/// One entry of the op-level finite-difference suite.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: Real,
    pub max_elem_error: Real,
    /// Coordinates compared, summed over cases.
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a kink.
    pub skipped: usize,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).expect("non-empty shape")
}

/// Uniform in ±[margin, 1] so that no value sits near a kink at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: Real) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .expect("non-empty shape")
}

/// Distinct, well separated values in [-1, 1] (no ties for max/top-k).
pub(crate) fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape, |i| -1.0 + 2.0 * (idx[i] as Real + 0.5) / n as Real).expect("non-empty shape")
}

/// Projects an output onto fixed random coefficients so every element of the
/// gradient is generic (plain sums make batchnorm gradients vanish).
fn project(g: &mut Graph, y: Var, coeffs: &Tensor) -> Result<Var> {
    let c = g.constant(coeffs.clone());
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

fn coeffs_for(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    away_from_zero(rng, shape, 0.25)
}

/// Step for ops that are linear (or piecewise linear away from kinks).
#[cfg(not(feature = "f64"))]
const LINEAR_STEP: Real = 1e-2;
#[cfg(feature = "f64")]
const LINEAR_STEP: Real = 1e-5;
/// Step for smooth nonlinear ops.
#[cfg(not(feature = "f64"))]
const SMOOTH_STEP: Real = 1e-2;
#[cfg(feature = "f64")]
const SMOOTH_STEP: Real = 1e-5;

/// Finite-difference checks of every differentiable op on `cases` random
/// instances each; returns the worst error per op.
pub fn run_suite(cases: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut record = |op: &'static str, errs: Vec<GradCheck>| {
        out.push(OpCheck {
            op,
            cases: errs.len(),
            max_rel_error: errs.iter().map(|e| e.max_rel_error).fold(0.0, Real::max),
            max_elem_error: errs.iter().map(|e| e.max_elem_error).fold(0.0, Real::max),
            checked: errs.iter().map(|e| e.checked).sum(),
            skipped: errs.iter().map(|e| e.skipped).sum(),
        });
    };

    // conv2d: input, kernel and bias together.
    let mut errs = Vec::new();
    for _ in 0..cases {
        let (b, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let k = rng.random_range(1..=3usize);
        let (h, w) = (rng.random_range(k..=6), rng.random_range(k..=6));
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=k / 2);
        let x = uniform(&mut rng, &[b, ci, h, w], -1.0, 1.0);
        let wt = uniform(&mut rng, &[co, ci, k, k], -1.0, 1.0);
        let bias = uniform(&mut rng, &[co], -1.0, 1.0);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let c = coeffs_for(&mut rng, &[b, co, oh, ow]);
        errs.push(grad_check_report(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                project(g, y, &c)
            },
            &[x, wt, bias],
            LINEAR_STEP,
        )?);
    }
    record("conv2d", errs);

    let mut errs = Vec::new();
    for _ in 0..cases {
        let (h, w) = (rng.random_range(2..=6), rng.random_range(2..=6));
        let scale = [0.5, 0.75, 1.5, 2.0][rng.random_range(0..4)];
        let x = uniform(&mut rng, &[1, 2, h, w], -1.0, 1.0);
        let oh = crate::nn::scaled_extent(h, scale);
        let ow = crate::nn::scaled_extent(w, scale);
        let c = coeffs_for(&mut rng, &[1, 2, oh, ow]);
        errs.push(grad_check_report(
            |g, v| {
                let y = g.bilinear_resize(v[0], scale, scale)?;
                project(g, y, &c)
            },
            &[x],
            LINEAR_STEP,
        )?);
    }
    record("bilinear_resize", errs);

    let mut errs = Vec::new();
    for case in 0..cases {
        let (b, ch) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let x = uniform(&mut rng, &[b, ch, h, w], -1.0, 1.0);
        let gamma = uniform(&mut rng, &[ch], 0.5, 1.5);
        let beta = uniform(&mut rng, &[ch], -0.5, 0.5);
        let c = coeffs_for(&mut rng, &[b, ch, h, w]);
        let train = case % 2 == 0;
        let rm: Vec<Real> = (0..ch).map(|_| rng.random_range(-0.5..0.5)).collect();
        let rv: Vec<Real> = (0..ch).map(|_| rng.random_range(0.5..1.5)).collect();
        errs.push(grad_check_report(
            |g, v| {
                let stats = if train {
                    BnStats::Batch
                } else {
                    BnStats::Running { mean: &rm, var: &rv }
                };
                let (y, _) = g.batchnorm(v[0], v[1], v[2], 0, stats, crate::nn::batchnorm::BN_EPS)?;
                project(g, y, &c)
            },
            &[x, gamma, beta],
            SMOOTH_STEP,
        )?);
    }
    record("batchnorm2d", errs);

    let mut errs = Vec::new();
    for _ in 0..cases {
        let (b, n, m) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=4));
        let x = uniform(&mut rng, &[b, n], -1.0, 1.0);
        let w = uniform(&mut rng, &[n, m], -1.0, 1.0);
        let bias = uniform(&mut rng, &[m], -1.0, 1.0);
        let c = coeffs_for(&mut rng, &[b, m]);
        errs.push(grad_check_report(
            |g, v| {
                let y = g.fully_connected(v[0], v[1], v[2])?;
                project(g, y, &c)
            },
            &[x, w, bias],
            LINEAR_STEP,
        )?);
    }
    record("fully_connected", errs);

    let mut errs = Vec::new();
    for _ in 0..cases {
        let b = rng.random_range(1..=6);
        let z = uniform(&mut rng, &[b, 1], -3.0, 3.0);
        let labels: Vec<Real> = (0..b).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        errs.push(grad_check_report(|g, v| g.bce_with_logits(v[0], &labels), &[z], SMOOTH_STEP)?);
    }
    record("bce_with_logits", errs);

    // topk_pool: selected values and the softmax-parameterized weights.
    let mut errs = Vec::new();
    for _ in 0..cases {
        let k = rng.random_range(1..=5);
        let (na, nb) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let a = separated(&mut rng, &[na, 4]);
        let b = separated(&mut rng, &[nb, 3]);
        let b = b.map(|v| v * 0.93 + 0.031);
        let logits = uniform(&mut rng, &[k], -1.0, 1.0);
        errs.push(grad_check_report(
            |g, v| {
                let w = g.softmax(v[2]);
                g.topk_pool(&[v[0], v[1]], w)
            },
            &[a, b, logits],
            1e-3,
        )?);
    }
    record("topk_pool", errs);

    // Elementwise ops and reductions.
    let mut errs = Vec::new();
    for _ in 0..cases {
        let shape = [rng.random_range(1..=4), rng.random_range(1..=4)];
        let x = away_from_zero(&mut rng, &shape, 0.1);
        let y = separated(&mut rng, &shape).map(|v| 1.0 + 0.5 * v);
        let c = coeffs_for(&mut rng, &shape);
        errs.push(grad_check_report(
            |g, v| {
                let s = g.sigmoid(v[0]);
                let r = g.relu(v[0]);
                let e = g.exp(v[1]);
                let l = g.log(v[1]);
                let p = g.mul(s, e)?;
                let q = g.sub(r, l)?;
                let z = g.add(p, q)?;
                let z = g.scale(z, 0.7);
                let m = g.max(v[1]);
                let z = g.mul(z, m)?;
                project(g, z, &c)
            },
            &[x, y],
            SMOOTH_STEP,
        )?);
    }
    record("elementwise", errs);

    let mut errs = Vec::new();
    for _ in 0..cases {
        let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
        let a = uniform(&mut rng, &[m, k], -1.0, 1.0);
        let b = uniform(&mut rng, &[k, n], -1.0, 1.0);
        let c = coeffs_for(&mut rng, &[m, 2 * n]);
        errs.push(grad_check_report(
            |g, v| {
                let p = g.matmul(v[0], v[1])?;
                let q = g.reshape(p, &[m, n])?;
                let cat = g.concat(&[q, p], 1)?;
                project(g, cat, &c)
            },
            &[a, b],
            LINEAR_STEP,
        )?);
    }
    record("matmul+concat", errs);

    // msconv composite (conv + resize + batchnorm + sw + relu) feeding top-k pooling.
    let mut errs = Vec::new();
    for case in 0..cases {
        let mut store = ParamStore::new();
        let cfg = MsConvConfig::default();
        let layer = MsConvLayer::new(&mut store, &mut rng, "ms", 2, cfg, 1.0)?;
        let pool = TopKPool::new(&mut store, "pool", 3, 1.0)?;
        let x = separated(&mut rng, &[2, 2, 6, 6]);
        let c = coeffs_for(&mut rng, &[18]);
        let params: Vec<Tensor> = store.iter().map(|p| p.value.clone()).collect();
        let mode = if case % 2 == 0 { Mode::Train } else { Mode::Eval };
        let inputs: Vec<Tensor> = std::iter::once(x).chain(params).collect();
        let err = grad_check_report(
            |g, v| msconv_topk_objective(g, &store, &layer, &pool, v, mode, &c),
            &inputs,
            SMOOTH_STEP,
        )?;
        errs.push(err);
    }
    record("msconv+topk", errs);

    // Full model: stem, msconv, top-k pooling, classifier and loss.
    let mut errs = Vec::new();
    for case in 0..cases {
        let cfg = ExperimentConfig {
            stem_channels: vec![3, 4],
            kernel_groups: vec![
                KernelGroup {
                    size: 2,
                    out_channels: 2,
                },
                KernelGroup {
                    size: 3,
                    out_channels: 3,
                },
            ],
            k: 3,
            seed: rng.random(),
            ..ExperimentConfig::default()
        };
        let model = MimsModel::build(&cfg)?;
        let x = separated(&mut rng, &[2, 1, 24, 24]);
        let label = (case % 2) as Real;
        let mode = if case % 4 < 2 { Mode::Train } else { Mode::Eval };
        let params: Vec<Tensor> = model.params.iter().map(|p| p.value.clone()).collect();
        let inputs: Vec<Tensor> = std::iter::once(x).chain(params).collect();
        errs.push(grad_check_report(
            |g, v| {
                for (id, &var) in model.params.ids().zip(&v[1..]) {
                    g.bind_param(id, var);
                }
                let out = model.forward_input(g, v[0], mode)?;
                g.bce_with_logits(out.logit, &[label])
            },
            &inputs,
            SMOOTH_STEP,
        )?);
    }
    record("full_model", errs);

    Ok(out)
}

/// The msconv layer wired to explicit graph leaves so the checker can
/// perturb its parameters like ordinary inputs.
fn msconv_topk_objective(
    g: &mut Graph,
    store: &ParamStore,
    layer: &MsConvLayer,
    pool: &TopKPool,
    v: &[Var],
    mode: Mode,
    coeffs: &Tensor,
) -> Result<Var> {
    for (id, &var) in store.ids().zip(&v[1..]) {
        g.bind_param(id, var);
    }
    let (maps, _) = layer.forward(g, store, v[0], mode)?;
    let w = pool.weights_var(g, store);
    let inputs: Vec<(Var, usize)> = maps.pool_inputs().collect();
    let f = g.channel_pool(&inputs, maps.channels, PoolKind::TopK, Some(w))?;
    project(g, f, coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.1]).unwrap();
        let err = grad_check(
            |g, v| {
                let y = g.scale(v[0], 3.0);
                Ok(g.sum(y))
            },
            &[x],
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn zero_gradient_scores_zero() {
        let x = Tensor::from_vec(vec![0.3, -0.7]).unwrap();
        let err = grad_check(
            |g, v| {
                let z = g.scale(v[0], 0.0);
                Ok(g.sum(z))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sigmoid_sum_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = uniform(&mut rng, &[4, 6], -1.0, 1.0);
        let err = grad_check(
            |g, v| {
                let s = g.sigmoid(v[0]);
                Ok(g.sum(s))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|g, v| Ok(g.sum(v[0])), &[x], 0.0).is_err());
    }
}
