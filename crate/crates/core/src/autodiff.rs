//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node index is already a topological order and
//! `backward` simply walks it in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::mil::{ChannelPoolSaved, TopKSaved};
use crate::nn::batchnorm::BnSaved;
use crate::nn::conv::ConvGeom;
use crate::nn::resize::ResizePlan;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    MatMul(Var, Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    SliceOuter { x: Var, index: usize },
    Sum(Var),
    Mean(Var),
    Max { x: Var, index: usize },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp { x: Var, lo: Real, hi: Real },
    Softmax(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Resize { x: Var, plan: ResizePlan },
    BatchNorm { x: Var, gamma: Var, beta: Var, offset: usize, saved: BnSaved },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    ChannelScale { x: Var, s: Var, offset: usize },
    Linear { x: Var, w: Var, b: Var },
    BceLogits { z: Var, labels: Vec<Real> },
    TopK { inputs: Vec<Var>, weights: Var, saved: TopKSaved },
    ChannelPool { inputs: Vec<(Var, usize)>, weights: Option<Var>, saved: ChannelPoolSaved },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::SliceOuter { .. } => "slice_outer",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Max { .. } => "max",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Clamp { .. } => "clamp",
            Op::Softmax(..) => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::Resize { .. } => "bilinear_resize",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::ChannelScale { .. } => "channel_scale",
            Op::Linear { .. } => "fully_connected",
            Op::BceLogits { .. } => "bce_with_logits",
            Op::TopK { .. } => "topk_pool",
            Op::ChannelPool { .. } => "channel_pool",
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Adjoint buffers handed to backward rules. Slots are created lazily and
/// only for nodes that lead back to a differentiable leaf.
pub(crate) struct Adjoints<'a> {
    slots: &'a mut [Option<Vec<Real>>],
    nodes: &'a [Node],
}

impl Adjoints<'_> {
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [Real]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.slots[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    pub(crate) fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Real>>>,
    params: HashMap<ParamId, Var>,
}

pub(crate) fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// The leaf holding a trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    /// Routes later `param(_, id)` lookups to an existing node.
    pub(crate) fn bind_param(&mut self, id: ParamId, v: Var) {
        self.params.insert(id, v);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Fingerprint of every discrete decision of the forward pass: relu
    /// signs, clamp regions, max and max-pool winners and top-k selections.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn active_set_signature(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    h.write_usize(i);
                    for &v in self.value(*x).data() {
                        h.write_u8((v > 0.0) as u8);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    h.write_usize(i);
                    for &v in self.value(*x).data() {
                        h.write_u8(if v < *lo { 0 } else if v > *hi { 2 } else { 1 });
                    }
                }
                Op::Max { index, .. } => {
                    h.write_usize(i);
                    h.write_usize(*index);
                }
                Op::MaxPool2 { argmax, .. } => {
                    h.write_usize(i);
                    argmax.iter().for_each(|&a| h.write_u32(a));
                }
                Op::TopK { saved, .. } => {
                    h.write_usize(i);
                    saved.hash_selection(&mut h);
                }
                Op::ChannelPool { saved, .. } => {
                    h.write_usize(i);
                    saved.hash_selection(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    /// Gradients of every parameter leaf; parameters the root did not reach get zeros.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = self.grad(v).unwrap_or_else(|| {
                    Tensor::from_parts(
                        self.value(v).shape().to_vec(),
                        vec![0.0; self.value(v).numel()],
                    )
                });
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Reverse sweep from a scalar root. Gradients accumulate across calls:
    /// running backward twice without [`Graph::zero_grads`] doubles them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.value(root).shape().to_vec();
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(shape));
        }
        self.backward_seeded(root, &[1.0])
    }

    pub(crate) fn backward_seeded(&mut self, root: Var, seed: &[Real]) -> Result<()> {
        if seed.len() != self.value(root).numel() {
            return Err(Error::NonScalarRoot(self.value(root).shape().to_vec()));
        }
        let mut slots: Vec<Option<Vec<Real>>> = vec![None; root.0 + 1];
        slots[root.0] = Some(seed.to_vec());
        for i in (0..=root.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let mut adj = Adjoints {
                slots: &mut slots,
                nodes: &self.nodes,
            };
            backward_rule(&self.nodes[i], &g, &mut adj);
            slots[i] = Some(g);
        }
        for (i, s) in slots.into_iter().enumerate() {
            let Some(s) = s else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&s).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(s),
            }
        }
        Ok(())
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Softmax(x) => vec![*x],
            Op::SliceOuter { x, .. }
            | Op::Max { x, .. }
            | Op::Clamp { x, .. }
            | Op::Resize { x, .. }
            | Op::MaxPool2 { x, .. }
            | Op::BceLogits { z: x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ChannelScale { x, s, .. } => vec![*x, *s],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::TopK { inputs, weights, .. } => {
                let mut v = inputs.clone();
                v.push(*weights);
                v
            }
            Op::ChannelPool { inputs, weights, .. } => {
                let mut v: Vec<Var> = inputs.iter().map(|(x, _)| *x).collect();
                v.extend(weights.iter().copied());
                v
            }
        }
    }

    // ----- elementwise and reductions -----

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<Real> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            ta.data().iter().map(|&x| f(x, y)).collect()
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            tb.data().iter().map(|&y| f(x, y)).collect()
        } else {
            return Err(shape_err(op, ta, tb));
        };
        let shape = if ta.numel() >= tb.numel() { ta.shape() } else { tb.shape() };
        Ok(Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        crate::nn::gemm::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*inputs.first().ok_or_else(|| Error::invalid("concat: no inputs"))?)
            .clone();
        if axis >= first.ndim() {
            return Err(Error::invalid(format!(
                "concat: axis {axis} out of range for rank {}",
                first.ndim()
            )));
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut total = 0;
        for &v in inputs {
            let t = self.value(v);
            let same = t.ndim() == first.ndim()
                && t.shape()[..axis] == first.shape()[..axis]
                && t.shape()[axis + 1..] == first.shape()[axis + 1..];
            if !same {
                return Err(shape_err("concat", &first, t));
            }
            total += t.shape()[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Item `index` of the leading axis, keeping a leading extent of 1.
    pub fn slice_outer(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x).slice_outer(index)?;
        Ok(self.push(t, Op::SliceOuter { x, index }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as Real), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let m = s / t.numel() as f64;
        self.push(Tensor::scalar(m as Real), Op::Mean(x))
    }

    /// Global maximum; the gradient goes to the first maximal element in flat order.
    pub fn max(&mut self, x: Var) -> Var {
        let (index, best) = first_max(self.value(x).data());
        self.push(Tensor::scalar(best), Op::Max { x, index })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(Real::exp);
        self.push(t, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.value(x).map(Real::ln);
        self.push(t, Op::Log(x))
    }

    pub fn clamp(&mut self, x: Var, lo: Real, hi: Real) -> Var {
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(t, Op::Clamp { x, lo, hi })
    }

    /// Normalized exponential over all elements.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = softmax(t.data());
        let t = Tensor::from_parts(t.shape().to_vec(), y);
        self.push(t, Op::Softmax(x))
    }
}

pub(crate) fn sigmoid(v: Real) -> Real {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(x: &[Real]) -> Vec<Real> {
    let m = x.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let e: Vec<f64> = x.iter().map(|&v| ((v - m) as f64).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|&v| (v / s) as Real).collect()
}

pub(crate) fn first_max(x: &[Real]) -> (usize, Real) {
    let mut index = 0;
    let mut best = x[0];
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            index = i;
        }
    }
    (index, best)
}

fn add_into(dst: Option<&mut [Real]>, src: impl Iterator<Item = Real>) {
    if let Some(d) = dst {
        d.iter_mut().zip(src).for_each(|(a, b)| *a += b);
    }
}

/// Adds `g` (shaped like the output) into an operand that may be a broadcast scalar.
fn add_broadcast(adj: &mut Adjoints, v: Var, g: &[Real], factor: impl Fn(usize) -> Real) {
    let n = adj.value(v).numel();
    let Some(slot) = adj.slot(v) else { return };
    if n == g.len() {
        slot.iter_mut().enumerate().for_each(|(i, s)| *s += g[i] * factor(i));
    } else {
        let total: f64 = g.iter().enumerate().map(|(i, &x)| (x * factor(i)) as f64).sum();
        slot[0] += total as Real;
    }
}

fn broadcast_at(t: &Tensor, i: usize) -> Real {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn backward_rule(node: &Node, g: &[Real], adj: &mut Adjoints) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_broadcast(adj, *a, g, |_| 1.0);
            add_broadcast(adj, *b, g, |_| 1.0);
        }
        Op::Sub(a, b) => {
            add_broadcast(adj, *a, g, |_| 1.0);
            add_broadcast(adj, *b, g, |_| -1.0);
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (adj.value(*a).clone(), adj.value(*b).clone());
            add_broadcast(adj, *a, g, |i| broadcast_at(&tb, i));
            add_broadcast(adj, *b, g, |i| broadcast_at(&ta, i));
        }
        Op::Scale(x, c) => add_into(adj.slot(*x), g.iter().map(|v| v * c)),
        Op::MatMul(a, b) => {
            let (ta, tb) = (adj.value(*a).clone(), adj.value(*b).clone());
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if let Some(da) = adj.slot(*a) {
                crate::nn::gemm::gemm(m, n, k, g, false, tb.data(), true, da, true);
            }
            if let Some(db) = adj.slot(*b) {
                crate::nn::gemm::gemm(k, m, n, ta.data(), true, g, false, db, true);
            }
        }
        Op::Reshape(x) => add_into(adj.slot(*x), g.iter().copied()),
        Op::Concat { inputs, axis } => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[axis + 1..].iter().product();
            let total = out.shape()[*axis] * inner;
            let mut start = 0;
            for &v in inputs {
                let chunk = adj.value(v).shape()[*axis] * inner;
                if let Some(d) = adj.slot(v) {
                    for o in 0..outer {
                        let src = &g[o * total + start..o * total + start + chunk];
                        d[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                start += chunk;
            }
        }
        Op::SliceOuter { x, index } => {
            let n = g.len();
            if let Some(d) = adj.slot(*x) {
                d[index * n..(index + 1) * n]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
        Op::Sum(x) => {
            let n = adj.value(*x).numel();
            add_into(adj.slot(*x), std::iter::repeat_n(g[0], n));
        }
        Op::Mean(x) => {
            let n = adj.value(*x).numel();
            add_into(adj.slot(*x), std::iter::repeat_n(g[0] / n as Real, n));
        }
        Op::Max { x, index } => {
            if let Some(d) = adj.slot(*x) {
                d[*index] += g[0];
            }
        }
        Op::Relu(x) => {
            let t = adj.value(*x).clone();
            add_into(
                adj.slot(*x),
                t.data().iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }),
            );
        }
        Op::Sigmoid(x) => add_into(
            adj.slot(*x),
            out.data().iter().zip(g).map(|(&y, &gv)| gv * y * (1.0 - y)),
        ),
        Op::Exp(x) => add_into(adj.slot(*x), out.data().iter().zip(g).map(|(&y, &gv)| gv * y)),
        Op::Log(x) => {
            let t = adj.value(*x).clone();
            add_into(adj.slot(*x), t.data().iter().zip(g).map(|(&v, &gv)| gv / v));
        }
        Op::Clamp { x, lo, hi } => {
            let t = adj.value(*x).clone();
            add_into(
                adj.slot(*x),
                t.data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v >= *lo && v <= *hi { gv } else { 0.0 }),
            );
        }
        Op::Softmax(x) => {
            let y = out.data();
            let dot: Real = y.iter().zip(g).map(|(a, b)| a * b).sum();
            add_into(adj.slot(*x), y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)));
        }
        Op::Conv2d { x, w, b, geom } => crate::nn::conv::backward(*x, *w, *b, geom, g, adj),
        Op::Resize { x, plan } => crate::nn::resize::backward(*x, plan, g, adj),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            offset,
            saved,
        } => crate::nn::batchnorm::backward(*x, *gamma, *beta, *offset, saved, g, adj),
        Op::MaxPool2 { x, argmax } => {
            if let Some(d) = adj.slot(*x) {
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src as usize] += gv;
                }
            }
        }
        Op::ChannelScale { x, s, offset } => {
            crate::nn::channel_scale_backward(*x, *s, *offset, g, adj)
        }
        Op::Linear { x, w, b } => crate::nn::linear_backward(*x, *w, *b, g, adj),
        Op::BceLogits { z, labels } => {
            let t = adj.value(*z).clone();
            let n = labels.len() as Real;
            add_into(
                adj.slot(*z),
                t.data()
                    .iter()
                    .zip(labels)
                    .map(|(&zi, &yi)| g[0] * (sigmoid(zi) - yi) / n),
            );
        }
        Op::TopK {
            inputs,
            weights,
            saved,
        } => crate::mil::topk_backward(inputs, *weights, saved, g, adj),
        Op::ChannelPool {
            inputs,
            weights,
            saved,
        } => crate::mil::channel_pool_backward(inputs, *weights, saved, g, adj),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn reduce_sum_of_ones() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 3]).unwrap());
        let s = g.sum(x);
        assert_eq!(g.value(s).item().unwrap(), 6.0);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(1.5));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn second_backward_doubles() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, -2.0]));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, -8.0]);
        g.zero_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn unreachable_and_constant_nodes_get_no_grad() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let unused = g.variable(Tensor::scalar(7.0));
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[5.0]);
        assert!(g.grad(c).is_none());
        assert!(g.grad(unused).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::ones(&[2]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]).unwrap());
        let b = g.constant(Tensor::ones(&[3, 2]).unwrap());
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn max_routes_to_first_tie() {
        let mut g = Graph::new();
        let x = g.variable(t(&[4], &[1.0, 3.0, 3.0, 2.0]));
        let m = g.max(x);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn scalar_broadcast_grads_sum() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.variable(Tensor::scalar(2.0));
        let y = g.mul(x, s).unwrap();
        let r = g.sum(y);
        g.backward(r).unwrap();
        assert_eq!(g.grad(s).unwrap().data(), &[6.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_along_inner_axis() {
        let mut g = Graph::new();
        let a = g.variable(t(&[2, 1], &[1.0, 2.0]));
        let b = g.variable(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    }
}
