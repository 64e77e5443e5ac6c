//! Append-only reverse-mode tape.
//!
//! Nodes are only ever pushed, and every op references earlier nodes, so the
//! record is acyclic and reverse insertion order is a valid topological order
//! for the backward sweep.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, ConvGeometry};
use super::{broadcast_indices, broadcast_shape, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Uniform stride and zero padding applied on every spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvSpec { stride, padding }
    }
}

/// Batch statistics observed by a train-mode batch norm, used to update the
/// running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<Scalar>,
    /// Unbiased variance (biased when only one value per channel was seen).
    pub var: Vec<Scalar>,
}

impl BatchNormStats {
    pub fn update_running(&self, running_mean: &mut [Scalar], running_var: &mut [Scalar], momentum: Scalar) {
        for (r, b) in running_mean.iter_mut().zip(&self.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in running_var.iter_mut().zip(&self.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, Scalar),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    Transpose { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean { x: Var, axis: usize },
    Conv { x: Var, w: Var, geom: ConvGeometry },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Scalar>,
        inv_std: Vec<Scalar>,
        train: bool,
    },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<Scalar> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
    checked: bool,
}

fn acc(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let rest: usize = shape[2..].iter().product();
    (n, c, rest)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that asserts every produced value is finite.
    pub fn checked() -> Self {
        Graph {
            checked: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.checked {
            assert!(value.is_finite(), "non-finite value produced at node {}", self.nodes.len());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tensor that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x · wᵀ + b` over the last axis of `x`; `w` is `out × in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[out, inp], Some(&last)) = (ws.as_slice(), xs.last()) else {
            return Err(Error::dim("linear", &xs, &ws));
        };
        if last != inp {
            return Err(Error::dim("linear", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::dim("linear bias", &ws, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / inp;
        let mut y = gemm_nt(self.value(x).data(), self.value(w).data(), rows, inp, out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_exact_mut(out) {
                row.iter_mut().zip(bias).for_each(|(v, bv)| *v += bv);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, y)?, Op::Linear { x, w, b }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(Scalar, Scalar) -> Scalar) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::dim(name, ta.shape(), tb.shape()))?;
        let ia = broadcast_indices(ta.shape(), &shape);
        let ib = broadcast_indices(tb.shape(), &shape);
        let data = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
            .collect();
        Tensor::new(shape, data)
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise (Hadamard) product with trailing-axis broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: Scalar) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Softmax along `axis`, subtracting each slice's maximum first.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = softmax(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).transpose(perm)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose { x, perm: perm.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow(axis, start, len)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Mean along `axis`; the axis is removed (a rank-1 input yields `[1]`).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::dim("mean", t.shape(), &[axis]));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let len = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &t.data()[(o * len + a) * inner..][..inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        out.iter_mut().for_each(|v| *v /= len as Scalar);
        let mut shape: Vec<usize> = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mean { x, axis }, rg))
    }

    /// Batched 2-D cross-correlation: `x` is `n×cin×h×w`, `w` is `cout×cin×kh×kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[n, cin, h, wd], &[cout, kc, kh, kw]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::dim("conv2d", &xs, &ws));
        };
        if cin != kc {
            return Err(Error::dim("conv2d", &xs, &ws));
        }
        let geom = ConvGeometry::new(
            n,
            cin,
            cout,
            [1, h, wd],
            [1, kh, kw],
            [1, spec.stride, spec.stride],
            [0, spec.padding, spec.padding],
        )?;
        let y = geom.forward(self.value(x).data(), self.value(w).data());
        let shape = vec![n, cout, geom.output[1], geom.output[2]];
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(shape, y)?, Op::Conv { x, w, geom }, rg))
    }

    /// Batched 3-D cross-correlation: `x` is `n×cin×d×h×w`, `w` is `cout×cin×kd×kh×kw`.
    pub fn conv3d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[n, cin, d, h, wd], &[cout, kc, kd, kh, kw]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::dim("conv3d", &xs, &ws));
        };
        if cin != kc {
            return Err(Error::dim("conv3d", &xs, &ws));
        }
        let geom = ConvGeometry::new(
            n,
            cin,
            cout,
            [d, h, wd],
            [kd, kh, kw],
            [spec.stride; 3],
            [spec.padding; 3],
        )?;
        let y = geom.forward(self.value(x).data(), self.value(w).data());
        let mut shape = vec![n, cout];
        shape.extend_from_slice(&geom.output);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(shape, y)?, Op::Conv { x, w, geom }, rg))
    }

    /// Per-channel batch normalization of an `n×c×…` input.
    ///
    /// Train mode normalizes with the biased batch variance and returns the
    /// observed statistics; eval mode requires the running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: Scalar,
        mode: Mode,
        running: Option<(&[Scalar], &[Scalar])>,
    ) -> Result<(Var, Option<BatchNormStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim("batch_norm", &xs, self.shape(gamma)));
        }
        let (n, c, rest) = channel_layout(&xs);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("batch_norm", &xs, self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let count = n * rest;
        let (mean, var, stats) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xd[(i * c + ch) * rest..][..rest].iter().sum::<Scalar>();
                    }
                    let m = s / count as Scalar;
                    let mut ss = 0.0;
                    for i in 0..n {
                        ss += xd[(i * c + ch) * rest..][..rest]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<Scalar>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count as Scalar;
                }
                let unbiased = if count > 1 {
                    var.iter().map(|v| v * count as Scalar / (count - 1) as Scalar).collect()
                } else {
                    var.clone()
                };
                let stats = BatchNormStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => {
                let (rm, rv) = running.ok_or_else(|| {
                    Error::Contract("eval-mode batch norm needs running statistics".into())
                })?;
                if rm.len() != c || rv.len() != c {
                    return Err(Error::dim("batch_norm running stats", &xs, &[rm.len()]));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let inv_std: Vec<Scalar> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * rest;
                for j in off..off + rest {
                    xhat[j] = (xd[j] - mean[ch]) * inv_std[ch];
                    y[j] = g[ch] * xhat[j] + b[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(xs, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Mean softmax cross-entropy of `n×K` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let &[n, k] = ls.as_slice() else {
            return Err(Error::dim("cross_entropy", &ls, &[targets.len()]));
        };
        if targets.len() != n || targets.iter().any(|&t| t >= k) {
            return Err(Error::dim("cross_entropy", &ls, &[targets.len()]));
        }
        let probs = softmax(self.value(logits), 1)?.into_data();
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = &self.value(logits).data()[i * k..(i + 1) * k];
                let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<Scalar>().ln();
                lse - row[t]
            })
            .sum::<Scalar>()
            / n as Scalar;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Accumulates d`loss`/d(leaf) into every reachable gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                acc(&mut self.leaf_grads[i], dy);
                continue;
            }
            for (input, g) in self.input_grads(i, &dy)? {
                acc(&mut grads[input.0], g);
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, dy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    let da = gemm_nt(dy.data(), tb.data(), m, n, k);
                    out.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if self.rg(*b) {
                    let db = gemm_tn(ta.data(), dy.data(), m, k, n);
                    out.push((*b, Tensor::new(vec![k, n], db)?));
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (o, inp) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.numel() / inp;
                if self.rg(*x) {
                    let dx = gemm_nn(dy.data(), tw.data(), rows, o, inp);
                    out.push((*x, Tensor::new(tx.shape().to_vec(), dx)?));
                }
                if self.rg(*w) {
                    let dw = gemm_tn(dy.data(), tx.data(), rows, o, inp);
                    out.push((*w, Tensor::new(vec![o, inp], dw)?));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![0.0; o];
                    for row in dy.data().chunks_exact(o) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    out.push((b, Tensor::new(vec![o], db)?));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        out.push((v, reduce_to(dy, self.shape(v), |_| 1.0)));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let other = expand(tb, y.shape());
                    out.push((*a, reduce_to(dy, ta.shape(), |j| other[j])));
                }
                if self.rg(*b) {
                    let other = expand(ta, y.shape());
                    out.push((*b, reduce_to(dy, tb.shape(), |j| other[j])));
                }
            }
            Op::Scale(x, s) => out.push((*x, dy.map(|v| v * s))),
            Op::Relu(x) => {
                let tx = self.value(*x);
                let data = dy
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                out.push((*x, Tensor::new(tx.shape().to_vec(), data)?));
            }
            Op::Sigmoid(x) => {
                let data = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &s)| g * s * (1.0 - s))
                    .collect();
                out.push((*x, Tensor::new(y.shape().to_vec(), data)?));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_layout(y.shape(), *axis);
                let mut dx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + j;
                        let dot: Scalar = (0..len).map(|a| dy.data()[idx(a)] * y.data()[idx(a)]).sum();
                        for a in 0..len {
                            dx[idx(a)] = y.data()[idx(a)] * (dy.data()[idx(a)] - dot);
                        }
                    }
                }
                out.push((*x, Tensor::new(y.shape().to_vec(), dx)?));
            }
            Op::Transpose { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                out.push((*x, dy.transpose(&inv)?));
            }
            Op::Reshape(x) => out.push((*x, dy.clone().reshape(self.shape(*x))?)),
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        out.push((p, dy.narrow(*axis, start, len)?));
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, full, inner) = axis_layout(xs, *axis);
                let len = dy.shape()[*axis];
                let mut dx = vec![0.0; xs.iter().product()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&dy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, Tensor::new(xs.to_vec(), dx)?));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.shape(*x), dy.item()))),
            Op::Mean { x, axis } => {
                let xs = self.shape(*x);
                let (outer, len, inner) = axis_layout(xs, *axis);
                let mut dx = vec![0.0; xs.iter().product()];
                for o in 0..outer {
                    for a in 0..len {
                        for j in 0..inner {
                            dx[(o * len + a) * inner + j] = dy.data()[o * inner + j] / len as Scalar;
                        }
                    }
                }
                out.push((*x, Tensor::new(xs.to_vec(), dx)?));
            }
            Op::Conv { x, w, geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (dx, dw) = geom.backward(tx.data(), tw.data(), dy.data(), self.rg(*x));
                if let Some(dx) = dx {
                    out.push((*x, Tensor::new(tx.shape().to_vec(), dx)?));
                }
                if self.rg(*w) {
                    out.push((*w, Tensor::new(tw.shape().to_vec(), dw)?));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, rest) = channel_layout(y.shape());
                let g = self.value(*gamma).data();
                let d = dy.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * rest;
                        for j in off..off + rest {
                            dgamma[ch] += d[j] * xhat[j];
                            dbeta[ch] += d[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let m = (n * rest) as Scalar;
                    let mut dx = vec![0.0; d.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * rest;
                            for j in off..off + rest {
                                dx[j] = if *train {
                                    g[ch] * inv_std[ch] / m * (m * d[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    g[ch] * inv_std[ch] * d[j]
                                };
                            }
                        }
                    }
                    out.push((*x, Tensor::new(y.shape().to_vec(), dx)?));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, Tensor::new(vec![c], dgamma)?));
                }
                if self.rg(*beta) {
                    out.push((*beta, Tensor::new(vec![c], dbeta)?));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let ls = self.shape(*logits);
                let (n, k) = (ls[0], ls[1]);
                let scale = dy.item() / n as Scalar;
                let mut dx: Vec<Scalar> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * k + t] -= scale;
                }
                out.push((*logits, Tensor::new(vec![n, k], dx)?));
            }
        }
        Ok(out)
    }
}

fn sigmoid(v: Scalar) -> Scalar {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::dim("softmax", x.shape(), &[axis]));
    }
    let (outer, len, inner) = axis_layout(x.shape(), axis);
    let mut out = vec![0.0; x.numel()];
    let d = x.data();
    for o in 0..outer {
        for j in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + j;
            let max = (0..len).map(|a| d[idx(a)]).fold(Scalar::NEG_INFINITY, Scalar::max);
            let mut total = 0.0;
            for a in 0..len {
                let e = (d[idx(a)] - max).exp();
                out[idx(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[idx(a)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `t` broadcast to `shape`, flattened.
fn expand(t: &Tensor, shape: &[usize]) -> Vec<Scalar> {
    if t.shape() == shape {
        return t.data().to_vec();
    }
    broadcast_indices(t.shape(), shape)
        .into_iter()
        .map(|i| t.data()[i])
        .collect()
}

/// Sums `dy[j] * factor(j)` back onto an operand of shape `target` that was
/// broadcast to `dy`'s shape.
fn reduce_to(dy: &Tensor, target: &[usize], factor: impl Fn(usize) -> Scalar) -> Tensor {
    let mut out = Tensor::zeros(target);
    if dy.shape() == target {
        out.data_mut()
            .iter_mut()
            .zip(dy.data())
            .enumerate()
            .for_each(|(j, (o, g))| *o = g * factor(j));
        return out;
    }
    let idx = broadcast_indices(target, dy.shape());
    for (j, (&i, g)) in idx.iter().zip(dy.data()).enumerate() {
        out.data_mut()[i] += g * factor(j);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Scalar]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let theta = g.param(Tensor::from_fn(&[2, 3], |i| i as Scalar));
        let s = g.sum(theta);
        g.backward(s).unwrap();
        assert_eq!(g.grad(theta).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let theta = g.param(t(&[2], &[1., 2.]));
        let sq = g.mul(theta, theta).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(theta).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn unreachable_param_keeps_zero_grad() {
        let mut g = Graph::new();
        let a = g.param(t(&[2], &[1., 2.]));
        let b = g.param(t(&[2], &[3., 4.]));
        let s = g.sum(a);
        g.backward(s).unwrap();
        assert!(g.grad(b).is_none());
        assert_eq!(g.grad_or_zeros(b), Tensor::zeros(&[2]));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let a = g.param(t(&[2], &[1., 2.]));
        let s = g.sum(a);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[2., 2.]);
        g.zero_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1., 1.]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::new();
        let a = g.param(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[7.0, 7.0, 7.0]));
        let s = g.softmax(x, 0).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // exp(ln 2) / (1 + 2) = 2/3
        let y = g.constant(t(&[2], &[0.0, (2.0 as Scalar).ln()]));
        let s = g.softmax(y, 0).unwrap();
        assert!((g.value(s).data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let x = t(&[2, 2], &[1000.0, 1001.0, -1000.0, -1000.0]);
        let s = softmax(&x, 1).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as Scalar * 1.5));
        let ones = g.constant(Tensor::ones(&[2, 3]));
        let y = g.mul(x, ones).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let ones_row = g.constant(Tensor::ones(&[3]));
        let y = g.mul(x, ones_row).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn incompatible_broadcast_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn batch_norm_closed_form_standardization() {
        // batch {1, 3}: mean 2, biased variance 1
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1], &[1.0, 3.0]));
        let gamma = g.constant(Tensor::ones(&[1]));
        let beta = g.constant(Tensor::zeros(&[1]));
        let (y, stats) = g.batch_norm(x, gamma, beta, 1e-12, Mode::Train, None).unwrap();
        let y = g.value(y).data();
        assert!((y[0] + 1.0).abs() < 1e-9 && (y[1] - 1.0).abs() < 1e-9);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![2.0]);
    }

    #[test]
    fn batch_norm_identity_on_standardized_input() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4, 2], &[1., -1., -1., 1., 1., -1., -1., 1.]));
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        let eps = 1e-5;
        let (y, _) = g.batch_norm(x, gamma, beta, eps, Mode::Train, None).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(x)) < eps.sqrt());
    }

    #[test]
    fn batch_norm_zero_gamma_gives_beta() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 2, 2], |i| (i as Scalar).cos()));
        let gamma = g.constant(Tensor::zeros(&[2]));
        let beta = g.constant(t(&[2], &[0.25, -3.0]));
        let (y, _) = g.batch_norm(x, gamma, beta, 1e-5, Mode::Train, None).unwrap();
        for (i, &v) in g.value(y).data().iter().enumerate() {
            let ch = (i / 2) % 2;
            assert_eq!(v, [0.25, -3.0][ch]);
        }
    }

    #[test]
    fn batch_norm_single_sample_zero_variance() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[4.0, -2.0, 9.0]));
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        let (y, stats) = g.batch_norm(x, gamma, beta, 1e-5, Mode::Train, None).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.unwrap().var, vec![0.0; 3]);
    }

    #[test]
    fn batch_norm_running_update_uses_momentum() {
        let stats = BatchNormStats {
            mean: vec![1.0],
            var: vec![3.0],
        };
        let (mut m, mut v) = (vec![0.0], vec![1.0]);
        stats.update_running(&mut m, &mut v, 0.1);
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((v[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn eval_batch_norm_requires_running_stats() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1]));
        let gamma = g.constant(Tensor::ones(&[1]));
        let beta = g.constant(Tensor::zeros(&[1]));
        assert!(g.batch_norm(x, gamma, beta, 1e-5, Mode::Eval, None).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(&[2, 4]));
        let loss = g.cross_entropy(logits, &[0, 3]).unwrap();
        assert!((g.value(loss).item() - (4.0 as Scalar).ln()).abs() < 1e-12);
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        assert!((grad.at(&[0, 0]) - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!((grad.at(&[0, 1]) - 0.125).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn checked_graph_rejects_nan() {
        let mut g = Graph::checked();
        g.constant(Tensor::scalar(Scalar::NAN));
    }
}
