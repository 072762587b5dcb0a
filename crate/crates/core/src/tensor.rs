//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation as a node in insertion order. Inputs
//! always precede the nodes that consume them, so the backward pass is a
//! single sweep in reverse insertion order. Leaves are either constants or
//! trainable parameters; only trainable leaves receive gradients, and
//! nodes that do not depend on any trainable leaf are skipped entirely.
//!
//! Broadcasting is limited to leading-batch expansion: the smaller operand
//! of a binary op must have a shape that is a suffix of the larger one, or
//! hold a single element.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, contract_err};
use crate::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(config_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Zero-dimensional array holding one value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows x cols` matrix from row slices of equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(config_err!("ragged rows: {} vs {}", row.len(), cols));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(contract_err!("item() on array of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    /// Row `i` of the trailing two dimensions flattened over leading ones.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        let cols = *self.shape.last().unwrap_or(&1);
        if cols == 0 {
            0
        } else {
            self.data.len() / cols
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(config_err!(
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    TransposeLast2,
    MaskedSoftmax,
    Sigmoid,
    Log,
    Exp,
    RmsNorm { inv_rms: Vec<f64> },
    Gather { rows: Vec<usize> },
    Concat { widths: Vec<usize> },
    CrossEntropy { targets: Vec<usize>, probs: Vec<f64> },
    Clamp01,
    Sum,
    Mean,
    Reshape,
}

#[derive(Debug, Clone)]
struct Node<'a> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Cow<'a, Array>,
    requires_grad: bool,
    trainable: bool,
}

/// Append-only computation graph.
///
/// Leaves may borrow their arrays for the lifetime `'a`, which lets model
/// weights be bound without copying.
#[derive(Debug, Clone, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of trainable leaves produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn leaf(&mut self, value: Cow<'a, Array>, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad: trainable,
            trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable leaf owning its value.
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.leaf(Cow::Owned(value), false)
    }

    /// Non-trainable leaf borrowing its value.
    pub fn constant_ref(&mut self, value: &'a Array) -> NodeId {
        self.leaf(Cow::Borrowed(value), false)
    }

    /// Trainable leaf owning its value.
    pub fn param(&mut self, value: Array) -> NodeId {
        self.leaf(Cow::Owned(value), true)
    }

    /// Trainable leaf borrowing its value.
    pub fn param_ref(&mut self, value: &'a Array) -> NodeId {
        self.leaf(Cow::Borrowed(value), true)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Array) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value: Cow::Owned(value),
            requires_grad,
            trainable: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0] {
            return Err(config_err!(
                "matmul shapes {:?} x {:?}",
                av.shape,
                bv.shape
            ));
        }
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        let out = matmul_nn(&av.data, &bv.data, m, k, n);
        let value = Array {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(Op::MatMul, vec![a, b], value))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shape(&av.shape, &bv.shape)?;
        let numel: usize = shape.iter().product();
        let (an, bn) = (av.numel(), bv.numel());
        let data = (0..numel)
            .map(|i| f(av.data[i % an], bv.data[i % bn]))
            .collect();
        Ok(self.push(op, vec![a, b], Array { shape, data }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let av = self.value(a);
        let value = Array {
            shape: av.shape.clone(),
            data: av.data.iter().map(|x| x * factor).collect(),
        };
        self.push(Op::Scale(factor), vec![a], value)
    }

    /// Swaps the last two axes; leading axes are treated as a batch.
    pub fn transpose_last2(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.rank() < 2 {
            return Err(config_err!("transpose of rank-{} array", av.rank()));
        }
        let r = av.rank();
        let (m, n) = (av.shape[r - 2], av.shape[r - 1]);
        let mut shape = av.shape.clone();
        shape.swap(r - 2, r - 1);
        let data = transpose_batched(&av.data, m, n);
        Ok(self.push(Op::TransposeLast2, vec![a], Array { shape, data }))
    }

    /// Softmax along the last axis of `a + mask`.
    ///
    /// `mask` is additive: `0` allows an entry and `-inf` forbids it.
    /// Forbidden entries receive probability exactly zero. The mask shape
    /// must equal the full shape of `a` or its last two dimensions.
    pub fn row_softmax_with_additive_mask(&mut self, a: NodeId, mask: &Array) -> Result<NodeId> {
        let av = self.value(a);
        let mn = mask.numel();
        let shape_ok = mask.shape == av.shape
            || (av.rank() >= 2 && mask.rank() == 2 && mask.shape[..] == av.shape[av.rank() - 2..]);
        if !shape_ok || (mn == 0 && av.numel() != 0) {
            return Err(config_err!(
                "mask shape {:?} does not fit {:?}",
                mask.shape,
                av.shape
            ));
        }
        let cols = av.cols();
        let mut data = vec![0.0; av.numel()];
        for r in 0..av.rows() {
            let x = &av.data[r * cols..(r + 1) * cols];
            let mrow_start = (r * cols) % mn.max(1);
            let m = &mask.data[mrow_start..mrow_start + cols];
            let out = &mut data[r * cols..(r + 1) * cols];
            if !masked_softmax_row(x, m, out) {
                return Err(Error::InvalidMask { row: r });
            }
        }
        let value = Array {
            shape: av.shape.clone(),
            data,
        };
        Ok(self.push(Op::MaskedSoftmax, vec![a], value))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let av = self.value(a);
        let value = Array {
            shape: av.shape.clone(),
            data: av.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(op, vec![a], value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid, sigmoid)
    }

    /// Natural logarithm; non-positive inputs yield non-finite values.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log, libm::log)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp, libm::exp)
    }

    /// `min(1, max(0, x))`, passing gradient only strictly inside `(0, 1)`.
    pub fn clamp01(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Clamp01, |x| x.clamp(0.0, 1.0))
    }

    /// Divides each last-axis row by its root mean square.
    pub fn rms_normalize(&mut self, a: NodeId, eps: f64) -> NodeId {
        let av = self.value(a);
        let cols = av.cols();
        let rows = av.rows();
        let mut data = vec![0.0; av.numel()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &av.data[r * cols..(r + 1) * cols];
            let ms = x.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / libm::sqrt(ms + eps);
            for (o, v) in data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = v * inv;
            }
            inv_rms.push(inv);
        }
        let value = Array {
            shape: av.shape.clone(),
            data,
        };
        self.push(Op::RmsNorm { inv_rms }, vec![a], value)
    }

    /// Rows of an embedding table `[vocab, dim]` selected by token id.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let rows: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        if self.value(table).rank() != 2 {
            return Err(config_err!("embedding table must be rank 2"));
        }
        self.gather_rows(table, &rows)
    }

    /// Selects slices along the leading axis.
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        if av.rank() == 0 {
            return Err(config_err!("gather on a scalar"));
        }
        let lead = av.shape[0];
        let width: usize = av.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= lead {
                return Err(config_err!("row {} out of range for {:?}", r, av.shape));
            }
            data.extend_from_slice(&av.data[r * width..(r + 1) * width]);
        }
        let mut shape = av.shape.clone();
        shape[0] = rows.len();
        let value = Array { shape, data };
        Ok(self.push(
            Op::Gather {
                rows: rows.to_vec(),
            },
            vec![a],
            value,
        ))
    }

    /// Concatenates arrays that agree on every axis but the last.
    pub fn concat_last_axis(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| config_err!("concat of zero arrays"))?;
        let lead = self.value(*first).shape[..self.value(*first).rank().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rank() == 0 || v.shape[..v.rank() - 1] != lead[..] {
                return Err(config_err!(
                    "concat leading shape {:?} vs {:?}",
                    v.shape,
                    lead
                ));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Array { shape, data };
        Ok(self.push(Op::Concat { widths }, parts.to_vec(), value))
    }

    /// Mean negative log-likelihood of `targets` under row-softmaxed logits.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape[0] != targets.len() || targets.is_empty() {
            return Err(config_err!(
                "cross entropy logits {:?} with {} targets",
                lv.shape,
                targets.len()
            ));
        }
        let v = lv.shape[1];
        let mut probs = vec![0.0; lv.numel()];
        let mut total = 0.0;
        let mut tgt = Vec::with_capacity(targets.len());
        for (r, &t) in targets.iter().enumerate() {
            let t = t as usize;
            if t >= v {
                return Err(config_err!("target {} out of vocabulary {}", t, v));
            }
            let row = &lv.data[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = libm::exp(x - max);
                z += *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= z;
            }
            total += max + libm::log(z) - row[t];
            tgt.push(t);
        }
        let value = Array::scalar(total / targets.len() as f64);
        Ok(self.push(
            Op::CrossEntropy {
                targets: tgt,
                probs,
            },
            vec![logits],
            value,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        self.push(Op::Sum, vec![a], Array::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let s = av.data.iter().sum::<f64>() / av.numel().max(1) as f64;
        self.push(Op::Mean, vec![a], Array::scalar(s))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![a], value))
    }

    /// Gradients of a scalar node with respect to every trainable leaf.
    ///
    /// The tape is not modified, so calling this twice gives identical
    /// results.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(contract_err!("loss node {} not on tape", loss.0));
        }
        if self.value(loss).numel() != 1 {
            return Err(contract_err!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape
            ));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut out = Gradients {
            grads: vec![None; n],
        };
        pending[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = pending[idx].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                if node.trainable {
                    out.grads[idx] = Some(Array {
                        shape: node.value.shape.clone(),
                        data: g,
                    });
                }
                continue;
            }
            self.propagate(node, &g, &mut pending);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let needs = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let input = |i: usize| -> &Array { &self.nodes[node.inputs[i].0].value };
        let out = &node.value;
        let mut send = |i: usize, grad: Vec<f64>| accumulate(&mut pending[node.inputs[i].0], grad);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                if needs(0) {
                    let from_softmax = matches!(self.nodes[node.inputs[0].0].op, Op::MaskedSoftmax);
                    if from_softmax {
                        // The softmax backward scales by p, so entries where
                        // p == 0 never matter.
                        send(0, matmul_nt_pattern(g, &b.data, &a.data, m, n, k));
                    } else {
                        send(0, matmul_nn(g, &transpose_batched(&b.data, k, n), m, n, k));
                    }
                }
                if needs(1) {
                    send(1, matmul_tn(&a.data, g, m, k, n));
                }
            }
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (input(0), input(1));
                let (an, bn) = (a.numel(), b.numel());
                let sign = if matches!(node.op, Op::Sub) { -1.0 } else { 1.0 };
                for (i, (other, own_n)) in [(b, an), (a, bn)].into_iter().enumerate() {
                    if !needs(i) {
                        continue;
                    }
                    let mut grad = vec![0.0; own_n];
                    let on = other.numel();
                    for (j, gj) in g.iter().enumerate() {
                        let contrib = match node.op {
                            Op::Mul => gj * other.data[j % on],
                            _ if i == 1 => sign * gj,
                            _ => *gj,
                        };
                        grad[j % own_n] += contrib;
                    }
                    send(i, grad);
                }
            }
            Op::Scale(f) => send(0, g.iter().map(|x| x * f).collect()),
            Op::TransposeLast2 => {
                let r = out.rank();
                let (m, n) = (out.shape[r - 2], out.shape[r - 1]);
                send(0, transpose_batched(g, m, n));
            }
            Op::MaskedSoftmax => {
                let cols = out.cols();
                let mut grad = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let p = &out.data[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &pi), &gi) in grad[r * cols..(r + 1) * cols].iter_mut().zip(p).zip(gr) {
                        *o = pi * (gi - dot);
                    }
                }
                send(0, grad);
            }
            Op::Sigmoid => send(
                0,
                g.iter()
                    .zip(&out.data)
                    .map(|(gi, y)| gi * y * (1.0 - y))
                    .collect(),
            ),
            Op::Log => send(
                0,
                g.iter()
                    .zip(&input(0).data)
                    .map(|(gi, x)| gi / x)
                    .collect(),
            ),
            Op::Exp => send(0, g.iter().zip(&out.data).map(|(gi, y)| gi * y).collect()),
            Op::Clamp01 => send(
                0,
                g.iter()
                    .zip(&input(0).data)
                    .map(|(gi, &x)| if x > 0.0 && x < 1.0 { *gi } else { 0.0 })
                    .collect(),
            ),
            Op::RmsNorm { inv_rms } => {
                let cols = out.cols();
                let mut grad = vec![0.0; g.len()];
                for (r, inv) in inv_rms.iter().enumerate() {
                    let y = &out.data[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mean_gy = y.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for ((o, yi), gi) in grad[r * cols..(r + 1) * cols].iter_mut().zip(y).zip(gr) {
                        *o = inv * (gi - yi * mean_gy);
                    }
                }
                send(0, grad);
            }
            Op::Gather { rows } => {
                let a = input(0);
                let width: usize = a.shape[1..].iter().product();
                let mut grad = vec![0.0; a.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for (o, gi) in grad[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(&g[k * width..(k + 1) * width])
                    {
                        *o += gi;
                    }
                }
                send(0, grad);
            }
            Op::Concat { widths } => {
                let total: usize = widths.iter().sum();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for (i, &w) in widths.iter().enumerate() {
                    if needs(i) {
                        let mut grad = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            grad.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        send(i, grad);
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy { targets, probs } => {
                let v = probs.len() / targets.len();
                let scale = g[0] / targets.len() as f64;
                let mut grad: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    grad[r * v + t] -= scale;
                }
                send(0, grad);
            }
            Op::Sum => send(0, vec![g[0]; input(0).numel()]),
            Op::Mean => {
                let n = input(0).numel();
                send(0, vec![g[0] / n as f64; n]);
            }
            Op::Reshape => send(0, g.to_vec()),
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, grad: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, g) in existing.iter_mut().zip(grad) {
                *e += g;
            }
        }
        None => *slot = Some(grad),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let an: usize = a.iter().product();
    let bn: usize = b.iter().product();
    let fits = |small: &[usize], sn: usize, big: &[usize]| sn == 1 || big.ends_with(small);
    if a == b || fits(b, bn, a) && an >= bn {
        Ok(a.to_vec())
    } else if fits(a, an, b) {
        Ok(b.to_vec())
    } else {
        Err(config_err!("cannot broadcast {:?} with {:?}", a, b))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Writes the masked softmax of `x + mask` into `out`; false if every
/// entry is forbidden.
fn masked_softmax_row(x: &[f64], mask: &[f64], out: &mut [f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (&xi, &mi) in x.iter().zip(mask) {
        if mi != f64::NEG_INFINITY {
            max = max.max(xi + mi);
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut z = 0.0;
    for ((o, &xi), &mi) in out.iter_mut().zip(x).zip(mask) {
        *o = if mi == f64::NEG_INFINITY {
            0.0
        } else {
            libm::exp(xi + mi - max)
        };
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    true
}

fn transpose_batched(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let block = m * n;
    let mut out = vec![0.0; data.len()];
    if block == 0 {
        return out;
    }
    for (src, dst) in data.chunks(block).zip(out.chunks_mut(block)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

/// `[m, k] x [k, n]`. Zero entries of the left operand are skipped, which
/// makes masked attention products cheap.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Dot product with four independent accumulators so it vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `[m, k] x [n, k]^T -> [m, n]` restricted to the non-zero entries of
/// `pattern` (`[m, n]`); all other outputs are zero.
fn matmul_nt_pattern(a: &[f64], b: &[f64], pattern: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            if pattern[i * n + j] != 0.0 {
                c[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    }
    c
}

/// `[k, m]^T x [k, n] -> [m, n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        // Causal gradient rows end in zeros; skip them.
        let row = &b[p * n..(p + 1) * n];
        let len = row.iter().rposition(|&x| x != 0.0).map_or(0, |j| j + 1);
        let brow = &row[..len];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in c[i * n..i * n + len].iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Largest relative disagreement between autodiff and central differences.
///
/// `build` records a scalar function of the trainable leaf it receives.
/// The error for each coordinate is `|autodiff - central| / max(1, |central|)`.
pub fn finite_diff_check<'a, F>(build: F, point: &Array, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'a>, NodeId) -> Result<NodeId>,
{
    let eval = |x: Array| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.param(x);
        let out = build(&mut tape, leaf)?;
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let leaf = tape.param(point.clone());
    let out = build(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let zero = Array::zeros(point.shape());
    let analytic = grads.get(leaf).unwrap_or(&zero);
    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data[i] += step;
        let mut minus = point.clone();
        minus.data[i] -= step;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = libm::fabs(analytic.data[i] - central) / libm::fabs(central).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_matmul(a: &Array, b: &Array) -> Array {
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = Array::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data[i * k + p] * b.data[p * n + j];
                }
                out.data[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut t = Tape::new();
        let x = t.constant(Array::scalar(0.0));
        let y = t.sigmoid(x);
        assert_eq!(t.value(y).item().unwrap(), 0.5);
    }

    #[test]
    fn uniform_softmax_row() {
        let mut t = Tape::new();
        let x = t.constant(Array::from_rows(&[[0.0, 0.0, 0.0]]).unwrap());
        let y = t
            .row_softmax_with_additive_mask(x, &Array::zeros(&[1, 3]))
            .unwrap();
        for p in t.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_entries_are_exactly_zero() {
        let mut t = Tape::new();
        let x = t.constant(Array::from_rows(&[[3.0, 1.0, 2.0], [0.5, 9.0, -1.0]]).unwrap());
        let ninf = f64::NEG_INFINITY;
        let mask = Array::from_rows(&[[0.0, ninf, 0.0], [ninf, ninf, 0.0]]).unwrap();
        let y = t.row_softmax_with_additive_mask(x, &mask).unwrap();
        let v = t.value(y).data();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        assert_eq!(v[4], 0.0);
        assert_eq!(v[5], 1.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Array::zeros(&[2, 2]));
        let ninf = f64::NEG_INFINITY;
        let mask = Array::from_rows(&[[0.0, 0.0], [ninf, ninf]]).unwrap();
        assert_eq!(
            t.row_softmax_with_additive_mask(x, &mask),
            Err(Error::InvalidMask { row: 1 })
        );
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Array::from_rows(&[[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]]).unwrap();
        let b = Array::from_rows(&[[1.0, 0.0], [0.0, 1.0], [3.0, 4.0]]).unwrap();
        let mut t = Tape::new();
        let (an, bn) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.matmul(an, bn).unwrap();
        assert_eq!(t.value(c), &brute_matmul(&a, &b));
        assert_eq!(t.value(c).data(), &[7.0, 8.0, -3.0, -3.0]);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let mut t = Tape::new();
        let a = t.constant(Array::zeros(&[2, 3]));
        let b = t.constant(Array::zeros(&[2, 3]));
        assert!(matches!(t.matmul(a, b), Err(Error::Config(_))));
        let c = t.constant(Array::zeros(&[4]));
        assert!(matches!(t.add(a, c), Err(Error::Config(_))));
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(Array::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn sum_of_sigmoids_gradient() {
        let mut t = Tape::new();
        let x = t.param(Array::zeros(&[4]));
        let s = t.sigmoid(x);
        let y = t.sum(s);
        let g = t.backward(y).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(Array::scalar(2.0));
        let c = t.constant(Array::scalar(5.0));
        let y = t.mul(x, c).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item().unwrap(), 5.0);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut t = Tape::new();
        let x = t.param(Array::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn clamp_gradient_zero_at_and_beyond_bounds() {
        let mut t = Tape::new();
        let x = t.param(Array::from_vec(alloc::vec![-0.5, 0.0, 0.5, 1.0, 1.5]));
        let y = t.clamp01(x);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn square_finite_difference() {
        let err = finite_diff_check(
            |t, x| t.mul(x, x).and_then(|y| Ok(t.sum(y))),
            &Array::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn broadcast_scalar_and_suffix() {
        let mut t = Tape::new();
        let a = t.param(Array::new(alloc::vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let b = t.param(Array::from_vec(alloc::vec![1.0, 2.0, 3.0]));
        let s = t.param(Array::scalar(2.0));
        let ab = t.mul(a, b).unwrap();
        let abs = t.mul(s, ab).unwrap();
        let y = t.sum(abs);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[6.0, 10.0, 14.0]);
        assert_eq!(g.get(a).unwrap().data(), &[2.0, 4.0, 6.0, 2.0, 4.0, 6.0]);
        assert_eq!(g.get(s).unwrap().item().unwrap(), 0.0 + 2.0 + 6.0 + 3.0 + 8.0 + 15.0);
    }
}
