//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! A [`Tape`] records every operation in creation order, so node indices are a
//! topological order and the graph is acyclic by construction. Leaves may
//! borrow their values (model weights) instead of copying them into the tape.

use std::borrow::Cow;

use super::array::Array;
use super::kernels;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation that produced a node, with whatever the backward pass needs.
#[derive(Debug, Clone)]
pub enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a length-`n` bias to every row of an `m×n` input.
    AddBias(Var, Var),
    Scale(Var, S),
    AddScalar(Var, S),
    Gelu(Var),
    Softplus(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Var, Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<S>,
        inv_std: Vec<S>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        /// One `T×T` row-stochastic matrix per head.
        probs: Vec<Vec<S>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<S>,
    },
    Sum(Var),
}

impl<S> Op<S> {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Gelu(..) => "gelu",
            Op::Softplus(..) => "softplus",
            Op::Embedding { .. } => "embedding",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::CausalAttention { .. } => "causal_attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::ConcatRows(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Gelu(a)
            | Op::Softplus(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a) => vec![*a],
            Op::Embedding { table, .. } => vec![*table],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// One recorded operation and its forward value.
#[derive(Debug, Clone)]
pub struct Node<'a, S: Scalar> {
    pub op: Op<S>,
    pub value: Cow<'a, Array<S>>,
    pub requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Array<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for `var`, or `None` when the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Array<S>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, materializing zeros of `shape` when absent.
    pub fn take_or_zeros(&mut self, var: Var, shape: &[usize]) -> Array<S> {
        self.grads
            .get_mut(var.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Array::zeros(shape))
    }
}

impl<'a, S: Scalar> Tape<'a, S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, var: Var) -> &Node<'a, S> {
        &self.nodes[var.0]
    }

    pub fn value(&self, var: Var) -> &Array<S> {
        &self.nodes[var.0].value
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn requires(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op: Op<S>, value: Array<S>) -> Var {
        let requires_grad = op.inputs().iter().any(|&v| self.requires(v));
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned trainable leaf.
    pub fn leaf(&mut self, value: Array<S>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Cow::Owned(value),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array<S>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Cow::Owned(value),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf; `trainable` decides whether backward reaches it.
    pub fn param(&mut self, value: &'a Array<S>, trainable: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Cow::Borrowed(value),
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Array::from_vec(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op.kind(), self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Array::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        let cols = *sa.last().unwrap_or(&1);
        if sa.is_empty() || sb.len() != 1 || sb[0] != cols {
            return Err(Error::shape("add_bias", sa, sb));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = Array::from_vec(sa.to_vec(), out)?;
        Ok(self.push(Op::AddBias(a, bias), value))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a, c), value)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::gelu);
        self.push(Op::Gelu(a), value)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::softplus);
        self.push(Op::Softplus(a), value)
    }

    /// Gathers rows of a `V×d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape("embedding", shape, &[ids.len()]));
        }
        let (vocab, d) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::InvalidToken { id, vocab });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let value = Array::from_vec(vec![ids.len(), d], out)?;
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("concat_rows", sa, sb));
        }
        let shape = vec![sa[0] + sb[0], sa[1]];
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let value = Array::from_vec(shape, out)?;
        Ok(self.push(Op::ConcatRows(a, b), value))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::shape("layer_norm", sx, self.shape(gain)));
        }
        let (rows, cols) = (sx[0], sx[1]);
        for p in [gain, bias] {
            if self.shape(p) != [cols] {
                return Err(Error::shape("layer_norm", sx, self.shape(p)));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let n = S::of(cols as f64);
        let mut normalized = vec![S::zero(); rows * cols];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = self.value(x).row(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rstd = S::one() / (var + S::of(eps)).sqrt();
            inv_std[r] = rstd;
            for c in 0..cols {
                let xh = (row[c] - mean) * rstd;
                normalized[r * cols + c] = xh;
                out[r * cols + c] = xh * g[c] + b[c];
            }
        }
        let value = Array::from_vec(vec![rows, cols], out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            value,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (_, cols) = src.dims2();
        let mut out = vec![S::zero(); src.len()];
        for (row, o) in src.data().chunks(cols.max(1)).zip(out.chunks_mut(cols.max(1))) {
            kernels::softmax_row(row, o);
        }
        let value = Array::from_vec(src.shape().to_vec(), out).expect("same shape");
        self.push(Op::Softmax(a), value)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (_, cols) = src.dims2();
        let mut out = vec![S::zero(); src.len()];
        for (row, o) in src.data().chunks(cols.max(1)).zip(out.chunks_mut(cols.max(1))) {
            kernels::log_softmax_row(row, o);
        }
        let value = Array::from_vec(src.shape().to_vec(), out).expect("same shape");
        self.push(Op::LogSoftmax(a), value)
    }

    /// Multi-head scaled dot-product attention where position `i` only
    /// attends to positions `j <= i`. `q`, `k`, `v` are `T×d`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        for other in [k, v] {
            if self.shape(other) != sq.as_slice() {
                return Err(Error::shape("causal_attention", &sq, self.shape(other)));
            }
        }
        if sq.len() != 2 || heads == 0 || sq[1] % heads != 0 {
            return Err(Error::shape("causal_attention", &sq, &[heads]));
        }
        let (t, d) = (sq[0], sq[1]);
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![S::zero(); t * d];
        let mut probs = Vec::with_capacity(heads);
        let mut scores = vec![S::zero(); t];
        for h in 0..heads {
            let off = h * dh;
            let mut p = vec![S::zero(); t * t];
            for i in 0..t {
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    scores[j] = kernels::dot(qi, &kd[j * d + off..j * d + off + dh]) * scale;
                }
                kernels::softmax_row(&scores[..=i], &mut p[i * t..i * t + i + 1]);
                let out_row = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let pij = p[i * t + j];
                    for (o, &vv) in out_row.iter_mut().zip(&vd[j * d + off..j * d + off + dh]) {
                        *o += pij * vv;
                    }
                }
            }
            probs.push(p);
        }
        let value = Array::from_vec(vec![t, d], out)?;
        Ok(self.push(
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
            value,
        ))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `T×V` logits. Rows whose target is `None` (padding, prompt positions)
    /// contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", shape, &[targets.len()]));
        }
        let vocab = shape[1];
        let src = self.value(logits);
        let mut probs = vec![S::zero(); src.len()];
        let mut total = S::zero();
        for (r, target) in targets.iter().enumerate() {
            let Some(y) = *target else { continue };
            if y >= vocab {
                return Err(Error::InvalidToken { id: y, vocab });
            }
            let row = src.row(r);
            kernels::softmax_row(row, &mut probs[r * vocab..(r + 1) * vocab]);
            total -= row[y] - kernels::log_sum_exp(row);
        }
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Array::scalar(total),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    /// Reverse pass from a scalar `root`. Gradients start from zero on every
    /// call, so repeated calls return identical results.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array<S>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array::full(root_value.shape(), S::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array<S>>], var: Var, contribution: Array<S>) {
        if !self.requires(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn like(&self, var: Var, data: Vec<S>) -> Array<S> {
        Array::from_vec(self.shape(var).to_vec(), data).expect("gradient shape matches value")
    }

    fn backward_node(
        &self,
        node: &Node<'a, S>,
        g: &Array<S>,
        grads: &mut [Option<Array<S>>],
    ) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires(*a) {
                    let da = kernels::matmul_nt(gd, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.requires(*b) {
                    let db = kernels::matmul_tn(self.value(*a).data(), gd, m, k, n);
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires(*a) {
                    let da = gd.iter().zip(vb).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.requires(*b) {
                    let db = gd.iter().zip(va).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires(*bias) {
                    let cols = self.shape(*bias)[0];
                    let mut db = vec![S::zero(); cols];
                    for row in gd.chunks(cols) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *bias, self.like(*bias, db));
                }
            }
            Op::Scale(a, factor) => self.accumulate(grads, *a, g.map(|x| x * *factor)),
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::Gelu(a) => {
                let da = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gg, &x)| gg * kernels::gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Softplus(a) => {
                let da = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gg, &x)| gg * kernels::sigmoid(x))
                    .collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Embedding { table, ids } => {
                if self.requires(*table) {
                    let shape = self.shape(*table);
                    let d = shape[1];
                    let mut dt = vec![S::zero(); shape[0] * d];
                    for (t, &id) in ids.iter().enumerate() {
                        for (o, &x) in dt[id * d..(id + 1) * d].iter_mut().zip(&gd[t * d..(t + 1) * d]) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *table, self.like(*table, dt));
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                self.accumulate(grads, *a, self.like(*a, gd[..split].to_vec()));
                self.accumulate(grads, *b, self.like(*b, gd[split..].to_vec()));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, self.like(*a, gd.to_vec())),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let cols = self.shape(*gain)[0];
                let rows = inv_std.len();
                let gain_v = self.value(*gain).data();
                if self.requires(*gain) || self.requires(*bias) {
                    let mut dg = vec![S::zero(); cols];
                    let mut db = vec![S::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let gy = gd[r * cols + c];
                            dg[c] += gy * normalized[r * cols + c];
                            db[c] += gy;
                        }
                    }
                    self.accumulate(grads, *gain, self.like(*gain, dg));
                    self.accumulate(grads, *bias, self.like(*bias, db));
                }
                if self.requires(*x) {
                    let n = S::of(cols as f64);
                    let mut dx = vec![S::zero(); rows * cols];
                    for r in 0..rows {
                        let mut mean_dxh = S::zero();
                        let mut mean_dxh_xh = S::zero();
                        for c in 0..cols {
                            let dxh = gd[r * cols + c] * gain_v[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * normalized[r * cols + c];
                        }
                        mean_dxh /= n;
                        mean_dxh_xh /= n;
                        for c in 0..cols {
                            let dxh = gd[r * cols + c] * gain_v[c];
                            dx[r * cols + c] = inv_std[r]
                                * (dxh - mean_dxh - normalized[r * cols + c] * mean_dxh_xh);
                        }
                    }
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (_, cols) = node.value.dims2();
                let mut da = vec![S::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(gd.chunks(cols)).zip(da.chunks_mut(cols)) {
                    let inner = kernels::dot(yr, gr);
                    for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yy * (gg - inner);
                    }
                }
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let (_, cols) = node.value.dims2();
                let mut da = vec![S::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(gd.chunks(cols)).zip(da.chunks_mut(cols)) {
                    let total: S = gr.iter().copied().sum();
                    for ((d, &ly), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = gg - ly.exp() * total;
                    }
                }
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let shape = self.shape(*q);
                let (t, d) = (shape[0], shape[1]);
                let dh = d / heads;
                let scale = S::one() / S::of(dh as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![S::zero(); t * d];
                let mut dk = vec![S::zero(); t * d];
                let mut dv = vec![S::zero(); t * d];
                let mut dp = vec![S::zero(); t];
                for (h, p) in probs.iter().enumerate() {
                    let off = h * dh;
                    for i in 0..t {
                        let go = &gd[i * d + off..i * d + off + dh];
                        let mut weighted = S::zero();
                        for j in 0..=i {
                            dp[j] = kernels::dot(go, &vd[j * d + off..j * d + off + dh]);
                            weighted += dp[j] * p[i * t + j];
                        }
                        for j in 0..=i {
                            let pij = p[i * t + j];
                            let ds = pij * (dp[j] - weighted) * scale;
                            for c in 0..dh {
                                dq[i * d + off + c] += ds * kd[j * d + off + c];
                                dk[j * d + off + c] += ds * qd[i * d + off + c];
                                dv[j * d + off + c] += pij * go[c];
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, self.like(*q, dq));
                self.accumulate(grads, *k, self.like(*k, dk));
                self.accumulate(grads, *v, self.like(*v, dv));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let upstream = gd[0];
                let vocab = self.shape(*logits)[1];
                let mut dl = vec![S::zero(); probs.len()];
                for (r, target) in targets.iter().enumerate() {
                    let Some(y) = *target else { continue };
                    for c in 0..vocab {
                        dl[r * vocab + c] = upstream * probs[r * vocab + c];
                    }
                    dl[r * vocab + y] -= upstream;
                }
                self.accumulate(grads, *logits, self.like(*logits, dl));
            }
            Op::Sum(a) => {
                let upstream = gd[0];
                let n = self.value(*a).len();
                self.accumulate(grads, *a, self.like(*a, vec![upstream; n]));
            }
        }
        Ok(())
    }
}
