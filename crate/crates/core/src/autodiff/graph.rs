//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape. Every op pushes a node holding its
//! forward value and the ids of its inputs, so inputs always precede the
//! node that consumes them and a single reverse sweep visits each node once.
//! Leaves are either trainable parameters or frozen constants; constants
//! (and anything computed only from constants) never receive a gradient.

use std::borrow::Cow;

use super::tensor::{dot, l2_norm, Tensor};
use crate::error::{Error, Result};

/// Norm below which a vector is considered degenerate for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// `[m, n] + [n]`, bias added to every row.
    AddRowBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine(NodeId, f64),
    MatMul(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Softmax(NodeId, f64),
    LogSoftmax(NodeId),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize),
    SliceRow(NodeId, usize),
    StackRows(Vec<NodeId>),
    Pick(NodeId, usize),
    Sum(NodeId),
    Mean(NodeId),
    Cosine(NodeId, NodeId),
    RowCosines(NodeId, NodeId),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `id`, or `None` if the node is frozen or
    /// does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Matrix dims `(m, k)` of the left operand and `(k, n)` of the right one,
/// reading a vector as a row on the left and a column on the right.
fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize)> {
    let (m, ka) = match a.len() {
        1 => (1, a[0]),
        2 => (a[0], a[1]),
        _ => return None,
    };
    let (kb, n) = match b.len() {
        1 => (b[0], 1),
        2 => (b[0], b[1]),
        _ => return None,
    };
    (ka == kb).then_some((m, ka, n))
}

fn matmul_out_shape(a: &[usize], b: &[usize], m: usize, n: usize) -> Vec<usize> {
    match (a.len(), b.len()) {
        (1, 1) => vec![],
        (1, _) => vec![n],
        (_, 1) => vec![m],
        _ => vec![m, n],
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &w) in row.iter_mut().zip(brow) {
                *o += x * w;
            }
        }
    }
    out
}

fn softmax_raw(x: &[f64], tau: f64) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

fn log_softmax_raw(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v - lse).collect()
}

/// Temperature softmax over a plain slice, max-subtracted.
pub fn softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("softmax temperature must be > 0, got {tau}")));
    }
    Ok(softmax_raw(logits, tau))
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax_raw(logits)
}

/// Cosine similarity of two plain slices, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err("cosine", &[a.len()], &[b.len()]));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na <= COSINE_EPS || nb <= COSINE_EPS {
        return Err(Error::Degenerate(format!(
            "cosine of vectors with norms {na:e} and {nb:e}"
        )));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf that owns its value.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(Cow::Owned(value), true)
    }

    /// Trainable leaf borrowing its value.
    pub fn param_ref(&mut self, value: &'a Tensor) -> NodeId {
        self.leaf(Cow::Borrowed(value), true)
    }

    /// Frozen leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> NodeId {
        self.leaf(Cow::Borrowed(value), false)
    }

    /// Copies `x` into a frozen leaf, cutting gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
            return Ok(self.push(v, Op::Add(a, b), &[a, b]));
        }
        if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            let mut v = self.value(a).clone();
            let bias = self.value(b).data().to_vec();
            for r in 0..v.rows() {
                for (x, y) in v.row_mut(r).iter_mut().zip(&bias) {
                    *x += y;
                }
            }
            return Ok(self.push(v, Op::AddRowBias(a, b), &[a, b]));
        }
        Err(shape_err("add", sa, sb))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("sub", self.shape(a), self.shape(b)));
        }
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = map(self.value(x), |v| scale * v + shift);
        self.push(v, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> NodeId {
        let v = map(self.value(x), |v| scale * v);
        self.push(v, Op::Affine(x, scale), &[x])
    }

    /// Matrix product. A rank-1 left operand acts as a row vector and a
    /// rank-1 right operand as a column vector; the result drops the
    /// corresponding axis (vector · vector gives a scalar).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = matmul_dims(sa, sb).ok_or_else(|| shape_err("matmul", sa, sb))?;
        let shape = matmul_out_shape(sa, sb, m, n);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = map(self.value(x), f64::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = map(self.value(x), |v| 1.0 / (1.0 + (-v).exp()));
        self.push(v, Op::Sigmoid(x), &[x])
    }

    /// Natural log. Non-positive inputs produce non-finite values; callers
    /// feed it probabilities.
    pub fn log(&mut self, x: NodeId) -> NodeId {
        let v = map(self.value(x), f64::ln);
        self.push(v, Op::Log(x), &[x])
    }

    /// `exp(x_i / tau) / sum_k exp(x_k / tau)` over a vector.
    pub fn softmax_with_temperature(&mut self, x: NodeId, tau: f64) -> Result<NodeId> {
        if self.shape(x).len() != 1 {
            return Err(Error::Shape(format!("softmax expects a vector, got {:?}", self.shape(x))));
        }
        let v = Tensor::vector(softmax(self.value(x).data(), tau)?);
        Ok(self.push(v, Op::Softmax(x, tau), &[x]))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.softmax_with_temperature(x, 1.0)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shape(x).len() != 1 {
            return Err(Error::Shape(format!(
                "log_softmax expects a vector, got {:?}",
                self.shape(x)
            )));
        }
        let v = Tensor::vector(log_softmax_raw(self.value(x).data()));
        Ok(self.push(v, Op::LogSoftmax(x), &[x]))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::Shape(format!("concat expects vectors, got {:?}", self.shape(p))));
            }
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), parts))
    }

    /// `x[start..start + len]` of a vector.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 1 || start + len > s[0] {
            return Err(Error::Shape(format!("slice {start}..{} of {s:?}", start + len)));
        }
        let v = Tensor::vector(self.value(x).data()[start..start + len].to_vec());
        Ok(self.push(v, Op::Slice(x, start), &[x]))
    }

    /// Row `i` of a matrix as a vector.
    pub fn slice_row(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 || i >= s[0] {
            return Err(Error::Shape(format!("row {i} of {s:?}")));
        }
        let v = Tensor::vector(self.value(x).row(i).to_vec());
        Ok(self.push(v, Op::SliceRow(x, i), &[x]))
    }

    /// Stacks equal-length vectors as matrix rows.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let first = rows.first().ok_or_else(|| Error::Shape("stack of zero rows".into()))?;
        let cols = match self.shape(*first) {
            [c] => *c,
            s => return Err(Error::Shape(format!("stack_rows expects vectors, got {s:?}"))),
        };
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if self.shape(r) != [cols] {
                return Err(shape_err("stack_rows", self.shape(r), &[cols]));
            }
            data.extend_from_slice(self.value(r).data());
        }
        let v = Tensor::matrix(rows.len(), cols, data)?;
        Ok(self.push(v, Op::StackRows(rows.to_vec()), rows))
    }

    /// Element `i` of a vector as a scalar.
    pub fn pick(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 1 || i >= s[0] {
            return Err(Error::Lookup(format!("index {i} out of range for shape {s:?}")));
        }
        let v = Tensor::scalar(self.value(x).data()[i]);
        Ok(self.push(v, Op::Pick(x, i), &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(x), &[x])
    }

    /// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`. Errors when either norm is at
    /// most [`COSINE_EPS`].
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sa != sb {
            return Err(shape_err("cosine_similarity", sa, sb));
        }
        let c = cosine(self.value(a).data(), self.value(b).data())?;
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), &[a, b]))
    }

    /// Cosine similarity between vector `x` and every row of `table`.
    /// The error for a degenerate row names the row index.
    pub fn row_cosines(&mut self, x: NodeId, table: NodeId) -> Result<NodeId> {
        let (sx, st) = (self.shape(x), self.shape(table));
        if sx.len() != 1 || st.len() != 2 || st[1] != sx[0] {
            return Err(shape_err("row_cosines", sx, st));
        }
        let xv = self.value(x).data();
        let nx = l2_norm(xv);
        if nx <= COSINE_EPS {
            return Err(Error::Degenerate(format!("query vector has norm {nx:e}")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row(r);
            let nr = l2_norm(row);
            if nr <= COSINE_EPS {
                return Err(Error::Degenerate(format!("table row {r} has norm {nr:e}")));
            }
            out.push((dot(xv, row) / (nx * nr)).clamp(-1.0, 1.0));
        }
        Ok(self.push(Tensor::vector(out), Op::RowCosines(x, table), &[x, table]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 || self.value(loss).rank() > 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(map(self.value(loss), |_| 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros_like(self.value(id)));
        f(t.data_mut());
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let y = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, |d| add_into(d, gd));
                self.accumulate(grads, b, |d| add_into(d, gd));
            }
            Op::AddRowBias(a, b) => {
                self.accumulate(grads, a, |d| add_into(d, gd));
                let cols = self.value(b).len();
                self.accumulate(grads, b, |d| {
                    for row in gd.chunks(cols) {
                        add_into(d, row);
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, |d| add_into(d, gd));
                self.accumulate(grads, b, |d| {
                    for (x, g) in d.iter_mut().zip(gd) {
                        *x -= g;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |d| {
                    for ((x, g), w) in d.iter_mut().zip(gd).zip(vb) {
                        *x += g * w;
                    }
                });
                self.accumulate(grads, b, |d| {
                    for ((x, g), w) in d.iter_mut().zip(gd).zip(va) {
                        *x += g * w;
                    }
                });
            }
            Op::Affine(x, s) => self.accumulate(grads, x, |d| {
                for (v, g) in d.iter_mut().zip(gd) {
                    *v += s * g;
                }
            }),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = matmul_dims(ta.shape(), tb.shape()).expect("checked in forward");
                let (va, vb) = (ta.data(), tb.data());
                // dA = G Bᵀ
                self.accumulate(grads, a, |d| {
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            d[i * k + p] += dot(grow, &vb[p * n..(p + 1) * n]);
                        }
                    }
                });
                // dB = Aᵀ G
                self.accumulate(grads, b, |d| {
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = va[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &gv) in d[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * gv;
                            }
                        }
                    }
                });
            }
            Op::Tanh(x) => self.accumulate(grads, x, |d| {
                for ((v, g), t) in d.iter_mut().zip(gd).zip(y) {
                    *v += g * (1.0 - t * t);
                }
            }),
            Op::Sigmoid(x) => self.accumulate(grads, x, |d| {
                for ((v, g), s) in d.iter_mut().zip(gd).zip(y) {
                    *v += g * s * (1.0 - s);
                }
            }),
            Op::Log(x) => {
                let vx = self.value(x).data();
                self.accumulate(grads, x, |d| {
                    for ((v, g), xv) in d.iter_mut().zip(gd).zip(vx) {
                        *v += g / xv;
                    }
                });
            }
            Op::Softmax(x, tau) => {
                let gy = dot(gd, y);
                self.accumulate(grads, x, |d| {
                    for ((v, g), p) in d.iter_mut().zip(gd).zip(y) {
                        *v += p * (g - gy) / tau;
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let gs: f64 = gd.iter().sum();
                self.accumulate(grads, x, |d| {
                    for ((v, g), ly) in d.iter_mut().zip(gd).zip(y) {
                        *v += g - ly.exp() * gs;
                    }
                });
            }
            Op::Concat(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, |d| add_into(d, &gd[off..off + n]));
                    off += n;
                }
            }
            Op::Slice(x, start) => self.accumulate(grads, x, |d| {
                add_into(&mut d[start..start + gd.len()], gd);
            }),
            Op::SliceRow(x, i) => self.accumulate(grads, x, |d| {
                let n = gd.len();
                add_into(&mut d[i * n..(i + 1) * n], gd);
            }),
            Op::StackRows(ref rows) => {
                let n = self.value(rows[0]).len();
                for (r, &id) in rows.iter().enumerate() {
                    self.accumulate(grads, id, |d| add_into(d, &gd[r * n..(r + 1) * n]));
                }
            }
            Op::Pick(x, i) => self.accumulate(grads, x, |d| d[i] += gd[0]),
            Op::Sum(x) => self.accumulate(grads, x, |d| {
                for v in d.iter_mut() {
                    *v += gd[0];
                }
            }),
            Op::Mean(x) => self.accumulate(grads, x, |d| {
                let s = gd[0] / d.len() as f64;
                for v in d.iter_mut() {
                    *v += s;
                }
            }),
            Op::Cosine(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let c = y[0];
                let (na, nb) = (l2_norm(va), l2_norm(vb));
                let g0 = gd[0];
                // dc/da = b/(|a||b|) - c a/|a|²
                self.accumulate(grads, a, |d| {
                    for ((v, &x), &w) in d.iter_mut().zip(va).zip(vb) {
                        *v += g0 * (w / (na * nb) - c * x / (na * na));
                    }
                });
                self.accumulate(grads, b, |d| {
                    for ((v, &w), &x) in d.iter_mut().zip(vb).zip(va) {
                        *v += g0 * (x / (na * nb) - c * w / (nb * nb));
                    }
                });
            }
            Op::RowCosines(x, table) => {
                let xv = self.value(x).data();
                let t = self.value(table);
                let nx = l2_norm(xv);
                let norms: Vec<f64> = (0..t.rows()).map(|r| l2_norm(t.row(r))).collect();
                self.accumulate(grads, x, |d| {
                    for (r, (&gr, &c)) in gd.iter().zip(y).enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        let row = t.row(r);
                        let k = gr / (nx * norms[r]);
                        let kc = gr * c / (nx * nx);
                        for ((v, &e), &xi) in d.iter_mut().zip(row).zip(xv) {
                            *v += k * e - kc * xi;
                        }
                    }
                });
                self.accumulate(grads, table, |d| {
                    let cols = xv.len();
                    for (r, (&gr, &c)) in gd.iter().zip(y).enumerate() {
                        let row = t.row(r);
                        let nr = norms[r];
                        let k = gr / (nx * nr);
                        let kc = gr * c / (nr * nr);
                        for ((v, &e), &xi) in d[r * cols..(r + 1) * cols].iter_mut().zip(row).zip(xv) {
                            *v += k * xi - kc * e;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i2 = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(mat(1, 2, &[1.0, 2.0]));
        let b = g.constant(mat(2, 1, &[3.0, 4.0]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 1]);
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn cosine_hand_cases() {
        assert_eq!(cosine(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[2.0, 2.0, 2.0, 2.0], 0.3).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let p = softmax(&[1.0, 0.0], 0.1).unwrap();
        let e = (-10.0f64).exp();
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[1] - e / (1.0 + e)).abs() < 1e-18);
        assert!((p[0] - 0.9999546).abs() < 1e-7 && (p[1] - 4.54e-5).abs() < 1e-7);
        assert_eq!(softmax(&[5.0, 5.0, 5.0], 1.0).unwrap(), softmax(&[105.0, 105.0, 105.0], 1.0).unwrap());
        assert!(matches!(softmax(&[1.0], 0.0), Err(Error::Config(_))));
        assert!(matches!(softmax(&[1.0], -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, -1.0]));
        let p = g.mul(w, c).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_softmax_gradient_is_p_minus_onehot() {
        let logits = vec![0.3, -1.2, 2.0, 0.5];
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(logits.clone()));
        let p = g.softmax(x).unwrap();
        let py = g.pick(p, 2).unwrap();
        let lp = g.log(py);
        let loss = g.scale(lp, -1.0);
        let grads = g.backward(loss).unwrap();
        let probs = softmax(&logits, 1.0).unwrap();
        for (i, (&gv, &pv)) in grads.get(x).unwrap().data().iter().zip(&probs).enumerate() {
            let expect = pv - if i == 2 { 1.0 } else { 0.0 };
            assert!((gv - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn reg_term_gradient_vanishes_at_target() {
        let e = Tensor::vector(vec![0.6, 0.8]);
        let mut g = Graph::new();
        let x = g.param(e.clone());
        let t = g.constant(e);
        let c = g.cosine_similarity(x, t).unwrap();
        let l = g.affine(c, -1.0, 1.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn shared_node_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0]));
        let a = g.tanh(x);
        let b = g.add(a, a).unwrap();
        let s = g.sum(b);
        let grads = g.backward(s).unwrap();
        let expect: Vec<f64> = [1.0f64, -2.0].iter().map(|v| 2.0 * (1.0 - v.tanh().powi(2))).collect();
        assert_eq!(grads.get(x).unwrap().data(), expect.as_slice());
    }
}
