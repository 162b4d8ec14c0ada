//! Reverse-mode differentiation over [`NumArray`] values.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! stores its output, and records enough to route gradients back to its
//! inputs. Nodes are created in topological order by construction, so
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Only nodes that depend on a [`Graph::param`] leaf take part in the
//! backward sweep; constants and anything computed purely from constants
//! never receive a gradient.
//!
//! Conventions at non-differentiable points:
//! - `abs` has subgradient 0 at 0;
//! - elementwise `max` splits the gradient 50/50 on exact ties;
//! - [`Graph::time_max_pool`] routes to the lowest row index on ties.

use crate::error::{Error, Result};
use crate::tensor::NumArray;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Max,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Unary(UnaryKind, NodeId),
    Binary(BinaryKind, NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Concat(Vec<NodeId>),
    VConcat(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    SelectRows(NodeId, Vec<usize>),
    TimeMaxPool(NodeId, Vec<usize>),
    SoftmaxCrossEntropy(NodeId, Vec<usize>, NumArray),
    Sum(NodeId),
    Scale(NodeId, f64),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: NumArray,
    requires_grad: bool,
}

/// Tape of differentiable operations.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<NumArray>>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a vector or matrix, with max-subtraction.
pub fn softmax(logits: &NumArray) -> NumArray {
    let cols = logits.cols();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    out
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

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: NumArray) -> Result<NodeId> {
        self.push(Op::Leaf, value, true, "param")
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: NumArray) -> Result<NodeId> {
        self.push(Op::Leaf, value, false, "constant")
    }

    pub fn value(&self, id: NodeId) -> &NumArray {
        &self.nodes[id.0].value
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&NumArray> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros of its shape when nothing flowed into it.
    pub fn grad_or_zeros(&self, id: NodeId) -> NumArray {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| NumArray::zeros(self.value(id).shape()))
    }

    fn push(&mut self, op: Op, value: NumArray, requires_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), value, rg, "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        self.push(Op::Transpose(a), value, rg, "transpose")
    }

    pub fn unary(&mut self, kind: UnaryKind, a: NodeId) -> Result<NodeId> {
        let value = match kind {
            UnaryKind::Sigmoid => self.value(a).map(sigmoid),
            UnaryKind::Tanh => self.value(a).map(f64::tanh),
            UnaryKind::Abs => self.value(a).map(f64::abs),
        };
        let rg = self.rg(&[a]);
        self.push(Op::Unary(kind, a), value, rg, "unary")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        let value = match kind {
            BinaryKind::Add => x.zip_map(y, "add", |p, q| p + q)?,
            BinaryKind::Sub => x.zip_map(y, "sub", |p, q| p - q)?,
            BinaryKind::Mul => x.zip_map(y, "mul", |p, q| p * q)?,
            BinaryKind::Max => x.zip_map(y, "max", f64::max)?,
        };
        let rg = self.rg(&[a, b]);
        self.push(Op::Binary(kind, a, b), value, rg, "binary")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Max, a, b)
    }

    /// Adds vector `bias` to every row of matrix `m`.
    pub fn add_row_bias(&mut self, m: NodeId, bias: NodeId) -> Result<NodeId> {
        let (mv, bv) = (self.value(m), self.value(bias));
        if mv.ndim() != 2 || bv.ndim() != 1 || mv.cols() != bv.len() {
            return Err(Error::shape("add_row_bias", mv.shape(), bv.shape()));
        }
        let mut value = mv.clone();
        let b = bv.data();
        for row in value.data_mut().chunks_mut(b.len()) {
            for (x, &y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let rg = self.rg(&[m, bias]);
        self.push(Op::AddRowBias(m, bias), value, rg, "add_row_bias")
    }

    /// Concatenates vectors end to end, or matrices with equal row counts
    /// side by side.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let ndim = self.value(*first).ndim();
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.ndim() != ndim || v.rows() != rows || ndim == 0 || ndim > 2 {
                return Err(Error::shape("concat", self.value(*first).shape(), v.shape()));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if ndim == 1 { vec![total] } else { vec![rows, total] };
        let value = NumArray::new(shape, data)?;
        let rg = self.rg(parts);
        self.push(Op::Concat(parts.to_vec()), value, rg, "concat")
    }

    /// Stacks vectors (as single rows) and matrices vertically.
    pub fn vconcat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or(Error::Empty("vconcat"))?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols || v.ndim() == 0 || v.ndim() > 2 {
                return Err(Error::shape("vconcat", self.value(*first).shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = NumArray::matrix(rows, cols, data)?;
        let rg = self.rg(parts);
        self.push(Op::VConcat(parts.to_vec()), value, rg, "vconcat")
    }

    /// Columns `start..end` of a matrix (or elements of a vector).
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a);
        if start >= end || end > v.cols() || v.ndim() == 0 {
            return Err(Error::shape("slice_cols", v.shape(), &[start, end]));
        }
        let mut data = Vec::with_capacity(v.rows() * (end - start));
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let shape = if v.ndim() == 1 {
            vec![end - start]
        } else {
            vec![v.rows(), end - start]
        };
        let value = NumArray::new(shape, data)?;
        let rg = self.rg(&[a]);
        self.push(Op::SliceCols(a, start), value, rg, "slice_cols")
    }

    /// Rows `start..end` of a matrix, as a matrix.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a);
        if v.ndim() != 2 || start >= end || end > v.rows() {
            return Err(Error::shape("slice_rows", v.shape(), &[start, end]));
        }
        let c = v.cols();
        let value = NumArray::matrix(end - start, c, v.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(&[a]);
        self.push(Op::SliceRows(a, start), value, rg, "slice_rows")
    }

    /// Gathers rows by index (repeats allowed). Used for embedding lookup
    /// and row reversal.
    pub fn select_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        if v.ndim() != 2 || indices.is_empty() {
            return Err(Error::shape("select_rows", v.shape(), &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::shape("select_rows", v.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(indices.len() * v.cols());
        for &i in indices {
            data.extend_from_slice(v.row(i));
        }
        let value = NumArray::matrix(indices.len(), v.cols(), data)?;
        let rg = self.rg(&[a]);
        self.push(Op::SelectRows(a, indices.to_vec()), value, rg, "select_rows")
    }

    /// Per-column maximum over the rows of `h` whose mask entry is true.
    pub fn time_max_pool(&mut self, h: NodeId, mask: &[bool]) -> Result<NodeId> {
        let v = self.value(h);
        if v.ndim() != 2 || v.rows() != mask.len() {
            return Err(Error::shape("time_max_pool", v.shape(), &[mask.len()]));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyMask);
        }
        let d = v.cols();
        let mut best = vec![f64::NEG_INFINITY; d];
        let mut argmax = vec![0usize; d];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (j, &x) in v.row(i).iter().enumerate() {
                if x > best[j] {
                    best[j] = x;
                    argmax[j] = i;
                }
            }
        }
        let value = NumArray::vector(best);
        let rg = self.rg(&[h]);
        self.push(Op::TimeMaxPool(h, argmax), value, rg, "time_max_pool")
    }

    /// Mean over rows of `−log softmax(logits)[label]`. A vector of logits is
    /// treated as a single row.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        if v.ndim() == 0 || v.ndim() > 2 || v.rows() != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", v.shape(), &[labels.len()]));
        }
        let classes = v.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidLabel(bad));
        }
        let probs = softmax(v);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = v.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            total += lse - (row[label] - max);
        }
        let value = NumArray::scalar(total / labels.len() as f64);
        let rg = self.rg(&[logits]);
        self.push(
            Op::SoftmaxCrossEntropy(logits, labels.to_vec(), probs),
            value,
            rg,
            "softmax_cross_entropy",
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = NumArray::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), value, rg, "sum")
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, factor), value, rg, "scale")
    }

    /// Propagates d`loss`/d(node) to every node that depends on a param.
    /// Earlier gradients are discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<NumArray>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(NumArray::new(lv.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<NumArray>], id: NodeId, g: NumArray) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &NumArray, grads: &mut [Option<NumArray>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let ga = g.matmul_nt(self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.needs(*b) {
                    let gb = self.value(*a).matmul_tn(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?)?,
            Op::Unary(kind, a) => {
                let y = &node.value;
                let x = self.value(*a);
                let ga = match kind {
                    UnaryKind::Sigmoid => g.zip_map(y, "sigmoid'", |g, y| g * y * (1.0 - y))?,
                    UnaryKind::Tanh => g.zip_map(y, "tanh'", |g, y| g * (1.0 - y * y))?,
                    UnaryKind::Abs => g.zip_map(x, "abs'", |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })?,
                };
                self.accumulate(grads, *a, ga)?;
            }
            Op::Binary(kind, a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (ga, gb) = match kind {
                    BinaryKind::Add => (g.clone(), g.clone()),
                    BinaryKind::Sub => (g.clone(), g.map(|v| -v)),
                    BinaryKind::Mul => (g.zip_map(y, "mul'", |g, y| g * y)?, g.zip_map(x, "mul'", |g, x| g * x)?),
                    BinaryKind::Max => {
                        let mut ga = g.clone();
                        let mut gb = g.clone();
                        for (i, (&p, &q)) in x.data().iter().zip(y.data()).enumerate() {
                            if p > q {
                                gb.data_mut()[i] = 0.0;
                            } else if q > p {
                                ga.data_mut()[i] = 0.0;
                            } else {
                                ga.data_mut()[i] *= 0.5;
                                gb.data_mut()[i] *= 0.5;
                            }
                        }
                        (ga, gb)
                    }
                };
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::AddRowBias(m, bias) => {
                self.accumulate(grads, *m, g.clone())?;
                if self.needs(*bias) {
                    let cols = g.cols();
                    let mut gb = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (s, &x) in gb.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    self.accumulate(grads, *bias, NumArray::vector(gb))?;
                }
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, NumArray::new(pv.shape().to_vec(), data)?)?;
                    }
                    offset += w;
                }
            }
            Op::VConcat(parts) => {
                let cols = g.cols();
                let mut row = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let r = pv.rows();
                    if self.needs(p) {
                        let data = g.data()[row * cols..(row + r) * cols].to_vec();
                        self.accumulate(grads, p, NumArray::new(pv.shape().to_vec(), data)?)?;
                    }
                    row += r;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let w = g.cols();
                let mut ga = NumArray::zeros(av.shape());
                let ac = av.cols();
                for r in 0..g.rows() {
                    ga.data_mut()[r * ac + start..r * ac + start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut ga = NumArray::zeros(av.shape());
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, ga)?;
            }
            Op::SelectRows(a, indices) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut ga = NumArray::zeros(av.shape());
                for (r, &i) in indices.iter().enumerate() {
                    for (dst, &src) in ga.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                        *dst += src;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::TimeMaxPool(h, argmax) => {
                let hv = self.value(*h);
                let d = hv.cols();
                let mut gh = NumArray::zeros(hv.shape());
                for (j, &i) in argmax.iter().enumerate() {
                    gh.data_mut()[i * d + j] += g.data()[j];
                }
                self.accumulate(grads, *h, gh)?;
            }
            Op::SoftmaxCrossEntropy(logits, labels, probs) => {
                let scale = g.item() / labels.len() as f64;
                let cols = probs.cols();
                let mut gl = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    gl.data_mut()[r * cols + label] -= 1.0;
                }
                gl.scale_in_place(scale);
                self.accumulate(grads, *logits, gl)?;
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                let ga = NumArray::new(av.shape().to_vec(), vec![g.item(); av.len()])?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Scale(a, factor) => self.accumulate(grads, *a, g.map(|x| x * factor))?,
        }
        Ok(())
    }
}
