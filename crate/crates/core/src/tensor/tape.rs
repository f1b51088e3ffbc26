//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] owns every intermediate value produced during a forward pass.
//! Operations append nodes in evaluation order, so the node index order is
//! a topological order and the backward pass is a single reverse sweep.
//! [`Var`] is a plain index into the tape that created it.

use std::sync::Arc;

use super::matrix::{matmul_nt_acc, matmul_tn_acc, Matrix};
use crate::error::{Error, Result};

/// Variance floor used by [`Tape::feature_norm`] unless overridden.
pub const FEATURE_NORM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    SoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    RowL2Normalize { x: Var, norms: Vec<f64> },
    LeakyRelu(Var, f64),
    FeatureNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    MaxOverRows { x: Var, argmax: Vec<usize> },
    MeanOverRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, indices: Arc<[usize]> },
    CrossEntropy { logits: Var, targets: Arc<[usize]>, probs: Matrix },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Recording of a forward computation.
///
/// A tape is single-owner: build it, run `backward`, drop it. Distinct tapes
/// are independent and may live on different threads.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A tape that records operations for a later backward pass.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates; `backward` on it is an error.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that gradients flow into (parameters, differentiated inputs).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        let requires_grad = self.recording;
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, op: Op, value: Matrix, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", Op::MatMul(a, b), value, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push("add", Op::Add(a, b), value, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x -= y;
        }
        self.push("sub", Op::Sub(a, b), value, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        self.push("mul", Op::Mul(a, b), value, &[a, b])
    }

    /// Adds a `1 x cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.shape(a);
        if self.shape(row) != (1, cols) {
            return Err(Error::dim(
                "add_row",
                format!("{:?} row for {:?}", self.shape(row), self.shape(a)),
            ));
        }
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..value.rows() {
            for (x, y) in value.row_mut(i).iter_mut().zip(&r) {
                *x += y;
            }
        }
        self.push("add_row", Op::AddRow(a, row), value, &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * s);
        self.push("scale", Op::Scale(a, s), value, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v + s);
        self.push("add_scalar", Op::AddScalar(a), value, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push("transpose", Op::Transpose(a), value, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push("exp", Op::Exp(a), value, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        self.push("log", Op::Log(a), value, &[a])
    }

    /// Sum of all entries, as a 1x1 matrix.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::scalar(self.value(a).sum());
        self.push("sum", Op::Sum(a), value, &[a])
    }

    /// Mean of all entries, as a 1x1 matrix.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.data().is_empty() {
            return Err(Error::degenerate("mean", "empty matrix"));
        }
        let value = Matrix::scalar(m.sum() / m.data().len() as f64);
        self.push("mean", Op::Mean(a), value, &[a])
    }

    /// Per-row sums as an `rows x 1` column.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let sums: Vec<f64> = (0..m.rows()).map(|i| m.row(i).iter().sum()).collect();
        let value = Matrix::from_vec(m.rows(), 1, sums)?;
        self.push("row_sums", Op::RowSums(a), value, &[a])
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows_value(self.value(a), None);
        self.push("softmax_rows", Op::SoftmaxRows(a), value, &[a])
    }

    /// Row-wise softmax restricted to `mask` (row-major, same shape as `a`).
    /// Entries outside the mask are exactly zero. Every row needs at least one
    /// unmasked entry.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let m = self.value(a);
        if mask.len() != m.data().len() {
            return Err(Error::dim(
                "masked_softmax_rows",
                format!("mask of {} for {:?}", mask.len(), m.shape()),
            ));
        }
        for i in 0..m.rows() {
            if !mask[i * m.cols()..(i + 1) * m.cols()].iter().any(|&b| b) {
                return Err(Error::degenerate(
                    "masked_softmax_rows",
                    format!("row {i} has empty support"),
                ));
            }
        }
        let value = softmax_rows_value(m, Some(mask));
        self.push("masked_softmax_rows", Op::MaskedSoftmaxRows(a), value, &[a])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let mut value = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let n = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::degenerate(
                    "row_l2_normalize",
                    format!("row {i} has zero norm"),
                ));
            }
            for v in value.row_mut(i) {
                *v /= n;
            }
            norms.push(n);
        }
        self.push(
            "row_l2_normalize",
            Op::RowL2Normalize { x: a, norms },
            value,
            &[a],
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let value = self
            .value(a)
            .map(|v| if v > 0.0 { v } else { slope * v });
        self.push("leaky_relu", Op::LeakyRelu(a, slope), value, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.leaky_relu(a, 0.0)
    }

    /// Per-column standardization over the rows of `x`, followed by a
    /// learnable affine map: `gamma ⊙ (x - mean) / sqrt(var + eps) + beta`.
    /// `gamma` and `beta` are `1 x cols`. Variance is the biased estimate.
    pub fn feature_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, cols) = self.shape(x);
        if self.shape(gamma) != (1, cols) || self.shape(beta) != (1, cols) {
            return Err(Error::dim(
                "feature_norm",
                format!(
                    "affine {:?}/{:?} for {n}x{cols} input",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if n == 0 {
            return Err(Error::degenerate("feature_norm", "no rows"));
        }
        let xm = self.value(x);
        let mut xhat = xm.clone();
        let mut inv_std = vec![0.0; cols];
        for c in 0..cols {
            let mean = (0..n).map(|r| xm.get(r, c)).sum::<f64>() / n as f64;
            let var = (0..n).map(|r| (xm.get(r, c) - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[c] = inv;
            for r in 0..n {
                xhat.set(r, c, (xm.get(r, c) - mean) * inv);
            }
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut value = xhat.clone();
        for r in 0..n {
            for (c, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = g[c] * *v + b[c];
            }
        }
        self.push(
            "feature_norm",
            Op::FeatureNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
            &[x, gamma, beta],
        )
    }

    /// Column-wise maximum over rows (`1 x cols`). The gradient goes to the
    /// first row attaining the maximum.
    pub fn max_over_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.rows() == 0 {
            return Err(Error::degenerate("max_over_rows", "no rows"));
        }
        let mut argmax = vec![0usize; m.cols()];
        let mut best = m.row(0).to_vec();
        for r in 1..m.rows() {
            for (c, &v) in m.row(r).iter().enumerate() {
                if v > best[c] {
                    best[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let value = Matrix::row_vector(&best);
        self.push("max_over_rows", Op::MaxOverRows { x: a, argmax }, value, &[a])
    }

    /// Column-wise mean over rows (`1 x cols`).
    pub fn mean_over_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.rows() == 0 {
            return Err(Error::degenerate("mean_over_rows", "no rows"));
        }
        let mut acc = vec![0.0; m.cols()];
        for r in 0..m.rows() {
            for (s, v) in acc.iter_mut().zip(m.row(r)) {
                *s += v;
            }
        }
        let n = m.rows() as f64;
        let value = Matrix::row_vector(&acc.iter().map(|s| s / n).collect::<Vec<_>>());
        self.push("mean_over_rows", Op::MeanOverRows(a), value, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::degenerate("concat_cols", "no inputs"))?;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(Error::dim(
                    "concat_cols",
                    format!("row counts {rows} and {}", m.rows()),
                ));
            }
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push("concat_cols", Op::ConcatCols(parts.to_vec()), value, parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::degenerate("concat_rows", "no inputs"));
        }
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&mats)?;
        self.push("concat_rows", Op::ConcatRows(parts.to_vec()), value, parts)
    }

    /// Picks rows of `a` by index (repeats allowed); gradients scatter-add.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let rows = self.shape(a).0;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(
                "gather_rows",
                format!("index {bad} out of {rows} rows"),
            ));
        }
        let value = self.value(a).select_rows(indices);
        self.push(
            "gather_rows",
            Op::GatherRows {
                x: a,
                indices: indices.into(),
            },
            value,
            &[a],
        )
    }

    /// Mean softmax cross-entropy of `logits` rows against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let m = self.value(logits);
        if targets.len() != m.rows() || m.rows() == 0 {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} targets for {:?} logits", targets.len(), m.shape()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= m.cols()) {
            return Err(Error::dim(
                "cross_entropy",
                format!("target {bad} out of {} classes", m.cols()),
            ));
        }
        let probs = softmax_rows_value(m, None);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = m.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = Matrix::scalar(total / targets.len() as f64);
        self.push(
            "cross_entropy",
            Op::CrossEntropy {
                logits,
                targets: targets.into(),
                probs,
            },
            value,
            &[logits],
        )
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::dim(
                "backward",
                format!("loss must be 1x1, got {:?}", self.shape(loss)),
            ));
        }
        self.backward_with(loss, Matrix::scalar(1.0))
    }

    /// Backward pass from `root` seeded with an upstream gradient `seed`
    /// of the same shape as `root`.
    pub fn backward_with(&self, root: Var, seed: Matrix) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::NotRecording);
        }
        if seed.shape() != self.shape(root) {
            return Err(Error::dim(
                "backward_with",
                format!("seed {:?} for root {:?}", seed.shape(), self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(seed);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    matmul_nt_acc(g, bv, self.slot(grads, *a));
                }
                if self.requires_grad(*b) {
                    matmul_tn_acc(av, g, self.slot(grads, *b));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                if self.requires_grad(*b) {
                    let s = self.slot(grads, *b);
                    for (x, y) in s.data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                if self.requires_grad(*a) {
                    let s = self.slot(grads, *a);
                    for ((x, gv), w) in s.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *x += gv * w;
                    }
                }
                if self.requires_grad(*b) {
                    let s = self.slot(grads, *b);
                    for ((x, gv), w) in s.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *x += gv * w;
                    }
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g);
                if self.requires_grad(*row) {
                    let s = self.slot(grads, *row);
                    for r in 0..g.rows() {
                        for (x, gv) in s.data_mut().iter_mut().zip(g.row(r)) {
                            *x += gv;
                        }
                    }
                }
            }
            Op::Scale(a, k) => {
                if self.requires_grad(*a) {
                    let s = self.slot(grads, *a);
                    for (x, gv) in s.data_mut().iter_mut().zip(g.data()) {
                        *x += k * gv;
                    }
                }
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::Transpose(a) => {
                if self.requires_grad(*a) {
                    let gt = g.transpose();
                    self.slot(grads, *a).add_assign(&gt);
                }
            }
            Op::Exp(a) => {
                if self.requires_grad(*a) {
                    let y = node.value.clone();
                    let s = self.slot(grads, *a);
                    for ((x, gv), yv) in s.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *x += gv * yv;
                    }
                }
            }
            Op::Log(a) => {
                if self.requires_grad(*a) {
                    let xv = self.value(*a).clone();
                    let s = self.slot(grads, *a);
                    for ((x, gv), v) in s.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *x += gv / v;
                    }
                }
            }
            Op::Sum(a) => {
                if self.requires_grad(*a) {
                    let gv = g.item();
                    for x in self.slot(grads, *a).data_mut() {
                        *x += gv;
                    }
                }
            }
            Op::Mean(a) => {
                if self.requires_grad(*a) {
                    let n = self.value(*a).data().len() as f64;
                    let gv = g.item() / n;
                    for x in self.slot(grads, *a).data_mut() {
                        *x += gv;
                    }
                }
            }
            Op::RowSums(a) => {
                if self.requires_grad(*a) {
                    let s = self.slot(grads, *a);
                    for r in 0..s.rows() {
                        let gv = g.data()[r];
                        for x in s.row_mut(r) {
                            *x += gv;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                if self.requires_grad(*a) {
                    let y = node.value.clone();
                    let s = self.slot(grads, *a);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((x, yv), gv) in s.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *x += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::RowL2Normalize { x, norms } => {
                if self.requires_grad(*x) {
                    let y = node.value.clone();
                    let s = self.slot(grads, *x);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let n = norms[r];
                        for ((o, yv), gv) in s.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += (gv - yv * dot) / n;
                        }
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.requires_grad(*a) {
                    let xv = self.value(*a).clone();
                    let s = self.slot(grads, *a);
                    for ((o, gv), v) in s.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *o += if *v > 0.0 { *gv } else { slope * gv };
                    }
                }
            }
            Op::FeatureNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, cols) = xhat.shape();
                if self.requires_grad(*beta) {
                    let s = self.slot(grads, *beta);
                    for r in 0..n {
                        for (o, gv) in s.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
                if self.requires_grad(*gamma) {
                    let s = self.slot(grads, *gamma);
                    for r in 0..n {
                        for c in 0..cols {
                            s.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gam = self.value(*gamma).data().to_vec();
                    let nf = n as f64;
                    let s = self.slot(grads, *x);
                    for c in 0..cols {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for r in 0..n {
                            let d = g.get(r, c) * gam[c];
                            sum_d += d;
                            sum_dx += d * xhat.get(r, c);
                        }
                        for r in 0..n {
                            let d = g.get(r, c) * gam[c];
                            let v = inv_std[c] / nf * (nf * d - sum_d - xhat.get(r, c) * sum_dx);
                            s.data_mut()[r * cols + c] += v;
                        }
                    }
                }
            }
            Op::MaxOverRows { x, argmax } => {
                if self.requires_grad(*x) {
                    let s = self.slot(grads, *x);
                    let cols = s.cols();
                    for (c, &r) in argmax.iter().enumerate() {
                        s.data_mut()[r * cols + c] += g.data()[c];
                    }
                }
            }
            Op::MeanOverRows(a) => {
                if self.requires_grad(*a) {
                    let s = self.slot(grads, *a);
                    let n = s.rows() as f64;
                    for r in 0..s.rows() {
                        for (o, gv) in s.row_mut(r).iter_mut().zip(g.data()) {
                            *o += gv / n;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.shape(p).1;
                    if self.requires_grad(p) {
                        let s = self.slot(grads, p);
                        for r in 0..g.rows() {
                            for (o, gv) in s.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + cols]) {
                                *o += gv;
                            }
                        }
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.requires_grad(p) {
                        let s = self.slot(grads, p);
                        for r in 0..rows {
                            for (o, gv) in s.row_mut(r).iter_mut().zip(g.row(offset + r)) {
                                *o += gv;
                            }
                        }
                    }
                    offset += rows;
                }
            }
            Op::GatherRows { x, indices } => {
                if self.requires_grad(*x) {
                    let s = self.slot(grads, *x);
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, gv) in s.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.requires_grad(*logits) {
                    let scale = g.item() / targets.len() as f64;
                    let s = self.slot(grads, *logits);
                    for (r, &t) in targets.iter().enumerate() {
                        for (c, (o, p)) in s.row_mut(r).iter_mut().zip(probs.row(r)).enumerate() {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            *o += scale * (p - onehot);
                        }
                    }
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Matrix>], v: Var) -> &'g mut Matrix {
        let (r, c) = self.shape(v);
        grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c))
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
        if self.requires_grad(v) {
            self.slot(grads, v).add_assign(g);
        }
    }
}

/// Result of a backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn softmax_rows_value(m: &Matrix, mask: Option<&[bool]>) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let cols = m.cols();
    for r in 0..m.rows() {
        let row = m.row(r);
        let allowed = |c: usize| mask.is_none_or(|mk| mk[r * cols + c]);
        let mx = (0..cols)
            .filter(|&c| allowed(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let o = out.row_mut(r);
        for c in 0..cols {
            if allowed(c) {
                let e = (row[c] - mx).exp();
                o[c] = e;
                total += e;
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    out
}
