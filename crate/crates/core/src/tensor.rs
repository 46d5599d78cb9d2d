//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Tape`] records every executed operation in topological order
//! (define-by-run); [`Tape::backward`] walks the record once in reverse and
//! accumulates gradients into every leaf created with `requires_grad`.
//! Tapes are rebuilt per forward call and tensors already on a tape are
//! never mutated. A tape is confined to one thread; independent tapes may
//! run on independent threads.
//!
//! Everything in the model is a matrix, so shapes are `(rows, cols)`;
//! scalars are `1x1`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::mat::{self, Mat};

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Which GELU formula to apply.
///
/// `Exact` is the erf form and is what tests verify against; `TanhApprox`
/// is the cheaper tanh surrogate and is only selected when a caller
/// explicitly opts in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeluKind {
    Exact,
    TanhApprox,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    MulElem(TensorId, TensorId),
    Scale(TensorId, f64),
    /// Broadcast a `1 x n` row over every row of an `m x n` tensor.
    AddRow(TensorId, TensorId),
    /// Add a `b x n` tile cyclically to an `(k*b) x n` tensor.
    AddTiled(TensorId, TensorId),
    /// Insert a shared `1 x n` row before each `block`-row group.
    PrependRowPerBlock { x: TensorId, row: TensorId, block: usize },
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    SoftmaxRows(TensorId),
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    Gelu(TensorId, GeluKind),
    CrossEntropy { logits: TensorId, labels: Vec<usize> },
    MeanAll(TensorId),
    SumAll(TensorId),
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    SliceRows { x: TensorId, start: usize, len: usize },
    GatherRows { x: TensorId, indices: Vec<usize> },
    /// Squared L2 norm of each row: `m x n -> m x 1`.
    RowSqNorm(TensorId),
    SqrtElem(TensorId),
    LnElem(TensorId),
}

struct Node {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Topologically ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Construction ────────────────────────────────────────────────

    pub fn leaf(&mut self, value: &Mat, requires_grad: bool) -> TensorId {
        self.push(value.as_slice().to_vec(), value.rows(), value.cols(), Op::Leaf, requires_grad)
    }

    pub fn leaf_vec(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<TensorId> {
        if data.len() != rows * cols {
            return Err(Error::Usage(alloc::format!(
                "leaf_vec: {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(self.push(data, rows, cols, Op::Leaf, requires_grad))
    }

    fn push(&mut self, data: Vec<f64>, rows: usize, cols: usize, op: Op, needs: bool) -> TensorId {
        self.nodes.push(Node { data, rows, cols, op, needs_grad: needs, grad: None });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Accessors ───────────────────────────────────────────────────

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn dims(&self, id: TensorId) -> (usize, usize) {
        (self.nodes[id.0].rows, self.nodes[id.0].cols)
    }

    /// Scalar value of a `1x1` tensor.
    pub fn item(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn to_mat(&self, id: TensorId) -> Mat {
        let n = &self.nodes[id.0];
        Mat::from_vec(n.rows, n.cols, n.data.clone()).expect("node shape is consistent")
    }

    /// Gradient of a leaf after `backward`; `None` if none was computed.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    // ── Elementwise and broadcasting ops ────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "mul_elem", |x, y| x * y, Op::MulElem(a, b))
    }

    fn binary_same_shape(
        &mut self,
        a: TensorId,
        b: TensorId,
        opname: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::ShapeMismatch { op: opname, lhs: self.dims(a), rhs: self.dims(b) });
        }
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, r, c, op, needs))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let (r, cl) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let needs = self.needs(a);
        self.push(data, r, cl, Op::Scale(a, c), needs)
    }

    /// `a (m x n) + row (1 x n)` broadcast over rows.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(Error::ShapeMismatch { op: "add_row", lhs: (m, n), rhs: self.dims(row) });
        }
        let mut data = self.nodes[a.0].data.clone();
        let r = &self.nodes[row.0].data;
        for chunk in data.chunks_mut(n) {
            for (o, &v) in chunk.iter_mut().zip(r) {
                *o += v;
            }
        }
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(data, m, n, Op::AddRow(a, row), needs))
    }

    /// `a ((k*b) x n) + tile (b x n)` added block-cyclically; this is how a
    /// per-sample noise tensor is broadcast along the batch dimension.
    pub fn add_tiled(&mut self, a: TensorId, tile: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims(a);
        let (b, tn) = self.dims(tile);
        if tn != n || b == 0 || m % b != 0 {
            return Err(Error::ShapeMismatch { op: "add_tiled", lhs: (m, n), rhs: (b, tn) });
        }
        let mut data = self.nodes[a.0].data.clone();
        let t = &self.nodes[tile.0].data;
        for block in data.chunks_mut(b * n) {
            for (o, &v) in block.iter_mut().zip(t) {
                *o += v;
            }
        }
        let needs = self.needs(a) || self.needs(tile);
        Ok(self.push(data, m, n, Op::AddTiled(a, tile), needs))
    }

    /// Insert a shared row before each `block`-row group of `x`:
    /// `(k*block) x n -> (k*(block+1)) x n`.
    pub fn prepend_row_per_block(
        &mut self,
        x: TensorId,
        row: TensorId,
        block: usize,
    ) -> Result<TensorId> {
        let (m, n) = self.dims(x);
        if self.dims(row) != (1, n) || block == 0 || m % block != 0 {
            return Err(Error::ShapeMismatch {
                op: "prepend_row_per_block",
                lhs: (m, n),
                rhs: self.dims(row),
            });
        }
        let k = m / block;
        let mut data = Vec::with_capacity((m + k) * n);
        let r = &self.nodes[row.0].data;
        let xs = &self.nodes[x.0].data;
        for g in 0..k {
            data.extend_from_slice(r);
            data.extend_from_slice(&xs[g * block * n..(g + 1) * block * n]);
        }
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(data, m + k, n, Op::PrependRowPerBlock { x, row, block }, needs))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: (m, k), rhs: (k2, n) });
        }
        let mut data = vec![0.0; m * n];
        mat::matmul_nn(&mut data, &self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, m, n, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.dims(a);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(a);
        self.push(data, n, m, Op::Transpose(a), needs)
    }

    // ── Nonlinearities ──────────────────────────────────────────────

    /// Row-wise softmax, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims(a);
        let src = &self.nodes[a.0].data;
        if src.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(&src[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        let needs = self.needs(a);
        Ok(self.push(data, m, n, Op::SoftmaxRows(a), needs))
    }

    /// Layer normalization over the last dimension followed by a
    /// per-column affine map.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (m, n) = self.dims(x);
        if eps <= 0.0 {
            return Err(Error::Usage(alloc::format!("layer_norm: eps must be > 0, got {eps}")));
        }
        if self.dims(gain) != (1, n) || self.dims(bias) != (1, n) {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: (m, n),
                rhs: self.dims(gain),
            });
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let (mean, var) = mean_var(row);
            let inv_std = 1.0 / fmath::sqrt(var + eps);
            let out = &mut data[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(data, m, n, Op::LayerNorm { x, gain, bias, eps }, needs))
    }

    pub fn gelu(&mut self, a: TensorId, kind: GeluKind) -> TensorId {
        let (m, n) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| gelu_fwd(x, kind)).collect();
        let needs = self.needs(a);
        self.push(data, m, n, Op::Gelu(a, kind), needs)
    }

    /// Mean over the batch of the label cross-entropy, with log-sum-exp
    /// stabilization. `logits` is `batch x classes`.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (m, n) = self.dims(logits);
        if labels.len() != m {
            return Err(Error::Usage(alloc::format!(
                "cross_entropy: {m} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::LabelOutOfRange { label: bad, num_classes: n });
        }
        let src = &self.nodes[logits.0].data;
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &src[i * n..(i + 1) * n];
            total += log_sum_exp(row) - row[label];
        }
        let data = vec![total / m as f64];
        let needs = self.needs(logits);
        Ok(self.push(data, 1, 1, Op::CrossEntropy { logits, labels: labels.to_vec() }, needs))
    }

    // ── Reductions and reshaping ────────────────────────────────────

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.nodes[a.0].data.iter().sum();
        let n = self.nodes[a.0].data.len() as f64;
        let needs = self.needs(a);
        self.push(vec![total / n], 1, 1, Op::MeanAll(a), needs)
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.nodes[a.0].data.iter().sum();
        let needs = self.needs(a);
        self.push(vec![total], 1, 1, Op::SumAll(a), needs)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::EmptyMatrix { op: "concat_rows" });
        }
        let n = self.dims(parts[0]).1;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut needs = false;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(Error::ShapeMismatch { op: "concat_rows", lhs: (rows, n), rhs: (r, c) });
            }
            rows += r;
            data.extend_from_slice(&self.nodes[p.0].data);
            needs |= self.needs(p);
        }
        Ok(self.push(data, rows, n, Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::EmptyMatrix { op: "concat_cols" });
        }
        let m = self.dims(parts[0]).0;
        let mut cols = 0;
        let mut needs = false;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(Error::ShapeMismatch { op: "concat_cols", lhs: (m, cols), rhs: (r, c) });
            }
            cols += c;
            needs |= self.needs(p);
        }
        let mut data = vec![0.0; m * cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.dims(p);
            let src = &self.nodes[p.0].data;
            for i in 0..m {
                data[i * cols + offset..i * cols + offset + c]
                    .copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        Ok(self.push(data, m, cols, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.dims(a);
        if start + len > m {
            return Err(Error::Usage(alloc::format!(
                "slice_rows: rows {start}..{} out of bounds for {m} rows",
                start + len
            )));
        }
        let data = self.nodes[a.0].data[start * n..(start + len) * n].to_vec();
        let needs = self.needs(a);
        Ok(self.push(data, len, n, Op::SliceRows { x: a, start, len }, needs))
    }

    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (m, n) = self.dims(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Usage(alloc::format!(
                "gather_rows: index {bad} out of bounds for {m} rows"
            )));
        }
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let needs = self.needs(a);
        Ok(self.push(data, indices.len(), n, Op::GatherRows { x: a, indices: indices.to_vec() }, needs))
    }

    /// Squared L2 norm of each row: `m x n -> m x 1`.
    pub fn row_sq_norm(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.dims(a);
        let src = &self.nodes[a.0].data;
        let data: Vec<f64> = (0..m)
            .map(|i| src[i * n..(i + 1) * n].iter().map(|x| x * x).sum())
            .collect();
        let needs = self.needs(a);
        self.push(data, m, 1, Op::RowSqNorm(a), needs)
    }

    pub fn sqrt_elem(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| fmath::sqrt(x)).collect();
        let needs = self.needs(a);
        self.push(data, m, n, Op::SqrtElem(a), needs)
    }

    pub fn ln_elem(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| fmath::ln(x)).collect();
        let needs = self.needs(a);
        self.push(data, m, n, Op::LnElem(a), needs)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Accumulates `d loss / d leaf` into every leaf that requires a
    /// gradient. `loss` must be scalar. Visits each node exactly once in
    /// reverse topological order.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { shape: (r, c) });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.take().expect("checked above");
            let op = self.nodes[i].op.clone();
            self.propagate(i, &grad, &op);
            // Leaves keep their accumulated gradient; interior nodes drop
            // theirs once consumed.
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(grad);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: TensorId, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let len = self.nodes[target.0].data.len();
        if self.nodes[target.0].grad.is_none() {
            self.nodes[target.0].grad = Some(vec![0.0; len]);
        }
        let mut g = self.nodes[target.0].grad.take().expect("just initialized");
        contrib(&mut g);
        self.nodes[target.0].grad = Some(g);
    }

    fn propagate(&mut self, node: usize, grad: &[f64], op: &Op) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, |g| add_into(g, grad));
                self.accumulate(b, |g| add_into(g, grad));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |g| add_into(g, grad));
                self.accumulate(b, |g| {
                    for (o, &v) in g.iter_mut().zip(grad) {
                        *o -= v;
                    }
                });
            }
            Op::MulElem(a, b) => {
                let bv = self.nodes[b.0].data.clone();
                self.accumulate(a, |g| {
                    for ((o, &gr), &v) in g.iter_mut().zip(grad).zip(&bv) {
                        *o += gr * v;
                    }
                });
                let av = self.nodes[a.0].data.clone();
                self.accumulate(b, |g| {
                    for ((o, &gr), &v) in g.iter_mut().zip(grad).zip(&av) {
                        *o += gr * v;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(a, |g| {
                    for (o, &v) in g.iter_mut().zip(grad) {
                        *o += c * v;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.accumulate(a, |g| add_into(g, grad));
                let n = self.nodes[row.0].data.len();
                self.accumulate(row, |g| {
                    for chunk in grad.chunks(n) {
                        for (o, &v) in g.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                });
            }
            Op::AddTiled(a, tile) => {
                self.accumulate(a, |g| add_into(g, grad));
                let len = self.nodes[tile.0].data.len();
                self.accumulate(tile, |g| {
                    for block in grad.chunks(len) {
                        for (o, &v) in g.iter_mut().zip(block) {
                            *o += v;
                        }
                    }
                });
            }
            Op::PrependRowPerBlock { x, row, block } => {
                let n = self.nodes[node].cols;
                let stride = (block + 1) * n;
                self.accumulate(row, |g| {
                    for group in grad.chunks(stride) {
                        for (o, &v) in g.iter_mut().zip(&group[..n]) {
                            *o += v;
                        }
                    }
                });
                self.accumulate(x, |g| {
                    for (gi, group) in grad.chunks(stride).enumerate() {
                        let dst = &mut g[gi * block * n..(gi + 1) * block * n];
                        add_into(dst, &group[n..]);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let n = self.nodes[b.0].cols;
                if self.nodes[a.0].needs_grad {
                    // dA = dC * B^T
                    let mut da = vec![0.0; m * k];
                    mat::matmul_nt(&mut da, grad, &self.nodes[b.0].data, m, n, k);
                    self.accumulate(a, |g| add_into(g, &da));
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T * dC
                    let mut db = vec![0.0; k * n];
                    mat::matmul_tn(&mut db, &self.nodes[a.0].data, grad, k, m, n);
                    self.accumulate(b, |g| add_into(g, &db));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.nodes[node].rows, self.nodes[node].cols);
                let mut dt = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dt[j * m + i] = grad[i * n + j];
                    }
                }
                self.accumulate(a, |g| add_into(g, &dt));
            }
            Op::SoftmaxRows(a) => {
                let n = self.nodes[node].cols;
                let out = self.nodes[node].data.clone();
                self.accumulate(a, |g| {
                    for (i, (srow, grow)) in out.chunks(n).zip(grad.chunks(n)).enumerate() {
                        let dot = mat::dot(grow, srow);
                        let dst = &mut g[i * n..(i + 1) * n];
                        for j in 0..n {
                            dst[j] += srow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let n = self.nodes[node].cols;
                let xs = self.nodes[x.0].data.clone();
                let gs = self.nodes[gain.0].data.clone();
                self.accumulate(bias, |g| {
                    for grow in grad.chunks(n) {
                        for (o, &v) in g.iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                });
                self.accumulate(gain, |g| {
                    for (xrow, grow) in xs.chunks(n).zip(grad.chunks(n)) {
                        let (mean, var) = mean_var(xrow);
                        let inv_std = 1.0 / fmath::sqrt(var + eps);
                        for j in 0..n {
                            g[j] += grow[j] * (xrow[j] - mean) * inv_std;
                        }
                    }
                });
                self.accumulate(x, |g| {
                    let nf = n as f64;
                    for (i, (xrow, grow)) in xs.chunks(n).zip(grad.chunks(n)).enumerate() {
                        let (mean, var) = mean_var(xrow);
                        let inv_std = 1.0 / fmath::sqrt(var + eps);
                        // dxhat, then the standard layer-norm input gradient
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (xrow[j] - mean) * inv_std;
                            let dxhat = grow[j] * gs[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let dst = &mut g[i * n..(i + 1) * n];
                        for j in 0..n {
                            let xhat = (xrow[j] - mean) * inv_std;
                            let dxhat = grow[j] * gs[j];
                            dst[j] += inv_std * (dxhat - sum_dxhat / nf - xhat * sum_dxhat_xhat / nf);
                        }
                    }
                });
            }
            Op::Gelu(a, kind) => {
                let xs = self.nodes[a.0].data.clone();
                self.accumulate(a, |g| {
                    for ((o, &gr), &x) in g.iter_mut().zip(grad).zip(&xs) {
                        *o += gr * gelu_bwd(x, kind);
                    }
                });
            }
            Op::CrossEntropy { logits, ref labels } => {
                let n = self.nodes[logits.0].cols;
                let m = self.nodes[logits.0].rows;
                let src = self.nodes[logits.0].data.clone();
                let upstream = grad[0] / m as f64;
                let labels = labels.clone();
                self.accumulate(logits, |g| {
                    let mut probs = vec![0.0; n];
                    for (i, &label) in labels.iter().enumerate() {
                        softmax_row(&src[i * n..(i + 1) * n], &mut probs);
                        let dst = &mut g[i * n..(i + 1) * n];
                        for j in 0..n {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dst[j] += upstream * (probs[j] - onehot);
                        }
                    }
                });
            }
            Op::MeanAll(a) => {
                let len = self.nodes[a.0].data.len();
                let v = grad[0] / len as f64;
                self.accumulate(a, |g| {
                    for o in g.iter_mut() {
                        *o += v;
                    }
                });
            }
            Op::SumAll(a) => {
                let v = grad[0];
                self.accumulate(a, |g| {
                    for o in g.iter_mut() {
                        *o += v;
                    }
                });
            }
            Op::ConcatRows(ref parts) => {
                let parts = parts.clone();
                let n = self.nodes[node].cols;
                let mut offset = 0;
                for p in parts {
                    let r = self.nodes[p.0].rows;
                    let piece = &grad[offset * n..(offset + r) * n];
                    self.accumulate(p, |g| add_into(g, piece));
                    offset += r;
                }
            }
            Op::ConcatCols(ref parts) => {
                let parts = parts.clone();
                let (m, cols) = (self.nodes[node].rows, self.nodes[node].cols);
                let mut offset = 0;
                for p in parts {
                    let c = self.nodes[p.0].cols;
                    self.accumulate(p, |g| {
                        for i in 0..m {
                            let src = &grad[i * cols + offset..i * cols + offset + c];
                            add_into(&mut g[i * c..(i + 1) * c], src);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceRows { x, start, len } => {
                let n = self.nodes[node].cols;
                self.accumulate(x, |g| {
                    add_into(&mut g[start * n..(start + len) * n], grad);
                });
            }
            Op::GatherRows { x, ref indices } => {
                let indices = indices.clone();
                let n = self.nodes[node].cols;
                self.accumulate(x, |g| {
                    for (pos, &i) in indices.iter().enumerate() {
                        add_into(&mut g[i * n..(i + 1) * n], &grad[pos * n..(pos + 1) * n]);
                    }
                });
            }
            Op::RowSqNorm(a) => {
                let n = self.nodes[a.0].cols;
                let xs = self.nodes[a.0].data.clone();
                self.accumulate(a, |g| {
                    for (i, &gr) in grad.iter().enumerate() {
                        let src = &xs[i * n..(i + 1) * n];
                        let dst = &mut g[i * n..(i + 1) * n];
                        for j in 0..n {
                            dst[j] += 2.0 * src[j] * gr;
                        }
                    }
                });
            }
            Op::SqrtElem(a) => {
                let out = self.nodes[node].data.clone();
                self.accumulate(a, |g| {
                    for ((o, &gr), &s) in g.iter_mut().zip(grad).zip(&out) {
                        *o += gr * 0.5 / s;
                    }
                });
            }
            Op::LnElem(a) => {
                let xs = self.nodes[a.0].data.clone();
                self.accumulate(a, |g| {
                    for ((o, &gr), &x) in g.iter_mut().zip(grad).zip(&xs) {
                        *o += gr / x;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = fmath::exp(x - max);
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let sum: f64 = row.iter().map(|&x| fmath::exp(x - max)).sum();
    max + fmath::ln(sum)
}

fn gelu_fwd(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Exact => 0.5 * x * (1.0 + fmath::erf(x / core::f64::consts::SQRT_2)),
        GeluKind::TanhApprox => {
            0.5 * x * (1.0 + fmath::tanh(fmath::SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)))
        }
    }
}

fn gelu_bwd(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Exact => {
            let phi = fmath::INV_SQRT_2PI * fmath::exp(-0.5 * x * x);
            0.5 * (1.0 + fmath::erf(x / core::f64::consts::SQRT_2)) + x * phi
        }
        GeluKind::TanhApprox => {
            let inner = fmath::SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
            let t = fmath::tanh(inner);
            let sech2 = 1.0 - t * t;
            let dinner = fmath::SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner
        }
    }
}
