//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its variables in execution
//! order, so a node's parents always precede it. [`Tape::backward`] walks the
//! nodes once in reverse and leaves `∂loss/∂node` for every node that
//! depends on a leaf. A tape is single-use: after `backward` it is frozen and
//! refuses new operations.
//!
//! ```
//! use kattn::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
//! let sq = tape.mul(a, a).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{finite, gemm, Broadcast, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, f64),
    Exp(usize),
    Square(usize),
    Relu(usize),
    Transpose(usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows {
        table: usize,
        index: Vec<usize>,
    },
    RelDot {
        coef: usize,
        table: usize,
        index: Vec<usize>,
    },
    SqDist(usize, usize),
    Normalize {
        scores: usize,
        mask: Vec<bool>,
        z: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        total_weight: f64,
    },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    frozen: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            frozen: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    /// Gradient left by [`Tape::backward`]; `None` if the node does not
    /// depend on any leaf or the loss does not depend on it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        assert!(!self.frozen, "recording on a frozen tape");
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.push_unchecked(value, op, needs_grad)
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        if self.frozen {
            return Err(Error::TapeFrozen);
        }
        if vars.iter().any(|v| v.tape != self.id || v.index >= self.nodes.len()) {
            return Err(Error::Detached);
        }
        Ok(())
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let out = finite("matmul", self.val(a.index).matmul(self.val(b.index))?)?;
        Ok(self.push(out, Op::MatMul(a.index, b.index), &[a.index, b.index]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let out = finite("matmul_t", self.val(a.index).matmul_t(self.val(b.index))?)?;
        Ok(self.push(out, Op::MatMulT(a.index, b.index), &[a.index, b.index]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let bc = Broadcast::resolve("add", self.val(a.index), self.val(b.index))?;
        let out = self.val(a.index).add(self.val(b.index))?;
        Ok(self.push(out, Op::Add(a.index, b.index, bc), &[a.index, b.index]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let bc = Broadcast::resolve("sub", self.val(a.index), self.val(b.index))?;
        let out = self.val(a.index).sub(self.val(b.index))?;
        Ok(self.push(out, Op::Sub(a.index, b.index, bc), &[a.index, b.index]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let bc = Broadcast::resolve("mul", self.val(a.index), self.val(b.index))?;
        let out = self.val(a.index).mul(self.val(b.index))?;
        Ok(self.push(out, Op::Mul(a.index, b.index, bc), &[a.index, b.index]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(&[a])?;
        let out = self.val(a.index).scale(c)?;
        Ok(self.push(out, Op::Scale(a.index, c), &[a.index]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let out = self.val(a.index).exp()?;
        Ok(self.push(out, Op::Exp(a.index), &[a.index]))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let out = finite("square", self.val(a.index).map(|v| v * v))?;
        Ok(self.push(out, Op::Square(a.index), &[a.index]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let out = self.val(a.index).map(|v| v.max(0.0));
        Ok(self.push(out, Op::Relu(a.index), &[a.index]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let out = self.val(a.index).transpose()?;
        Ok(self.push(out, Op::Transpose(a.index), &[a.index]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(&[a])?;
        let out = self.val(a.index).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows(a.index, start), &[a.index]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(&[a])?;
        let out = self.val(a.index).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols(a.index, start), &[a.index]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.check(parts)?;
        let idx: Vec<usize> = parts.iter().map(|v| v.index).collect();
        let vals: Vec<&Tensor> = idx.iter().map(|&i| self.val(i)).collect();
        let out = Tensor::concat_rows(&vals)?;
        Ok(self.push(out, Op::ConcatRows(idx.clone()), &idx))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.check(parts)?;
        let idx: Vec<usize> = parts.iter().map(|v| v.index).collect();
        let vals: Vec<&Tensor> = idx.iter().map(|&i| self.val(i)).collect();
        let out = Tensor::concat_cols(&vals)?;
        Ok(self.push(out, Op::ConcatCols(idx.clone()), &idx))
    }

    /// Embedding lookup: row `index[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        self.check(&[table])?;
        let out = self.val(table.index).gather_rows(index)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table: table.index,
                index: index.to_vec(),
            },
            &[table.index],
        ))
    }

    /// `out[i][j] = ⟨coef[i], table[index[i·cols + j]]⟩` for an
    /// `[rows × cols]` output, where `rows` is the row count of `coef`.
    pub fn rel_dot(&mut self, coef: Var, table: Var, index: &[usize], cols: usize) -> Result<Var> {
        self.check(&[coef, table])?;
        let c = self.val(coef.index);
        let t = self.val(table.index);
        let rows = c.rows();
        if c.cols() != t.cols() || index.len() != rows * cols || cols == 0 {
            return Err(Error::shape(
                "rel_dot",
                format!(
                    "coef {:?}, table {:?}, {} indices for {rows}×{cols}",
                    c.shape(),
                    t.shape(),
                    index.len()
                ),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&k| k >= t.rows()) {
            return Err(Error::shape("rel_dot", format!("table row {bad} of {}", t.rows())));
        }
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let ci = c.row(i);
            for j in 0..cols {
                let tj = t.row(index[i * cols + j]);
                out[i * cols + j] = ci.iter().zip(tj).map(|(x, y)| x * y).sum();
            }
        }
        let out = finite("rel_dot", Tensor::matrix(rows, cols, out)?)?;
        Ok(self.push(
            out,
            Op::RelDot {
                coef: coef.index,
                table: table.index,
                index: index.to_vec(),
            },
            &[coef.index, table.index],
        ))
    }

    /// Pairwise squared Euclidean distances between the rows of `a` and `b`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (x, y) = (self.val(a.index), self.val(b.index));
        if x.cols() != y.cols() {
            return Err(Error::shape("sq_dist", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let (n, m) = (x.rows(), y.rows());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = x.row(i).iter().zip(y.row(j)).map(|(p, q)| (p - q) * (p - q)).sum();
            }
        }
        let out = finite("sq_dist", Tensor::matrix(n, m, out)?)?;
        Ok(self.push(out, Op::SqDist(a.index, b.index), &[a.index, b.index]))
    }

    /// Row-normalizes `scores` over the entries where `mask` is true; masked
    /// entries get weight exactly zero and take no part in the normalizer.
    pub fn normalize_masked(&mut self, scores: Var, mask: &[bool], eps: f64) -> Result<Var> {
        self.check(&[scores])?;
        let s = self.val(scores.index);
        let (rows, cols) = (s.rows(), s.cols());
        if mask.len() != rows * cols {
            return Err(Error::shape(
                "normalize_masked",
                format!("mask of {} for scores {:?}", mask.len(), s.shape()),
            ));
        }
        let mut z = vec![0.0; rows];
        for i in 0..rows {
            let mut visible = false;
            for j in 0..cols {
                if mask[i * cols + j] {
                    visible = true;
                    let v = s.get(i, j);
                    if v < 0.0 {
                        return Err(Error::InvalidKernel {
                            row: i,
                            col: j,
                            score: v,
                        });
                    }
                    z[i] += v;
                }
            }
            if !visible {
                return Err(Error::EmptyVisibility { row: i });
            }
            if z[i].is_nan() || z[i] < eps {
                return Err(Error::DegenerateDenominator { row: i, sum: z[i], eps });
            }
            if !z[i].is_finite() {
                return Err(Error::Overflow { op: "normalize_masked" });
            }
        }
        let mut w = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                if mask[i * cols + j] {
                    w[i * cols + j] = s.get(i, j) / z[i];
                }
            }
        }
        let out = Tensor::matrix(rows, cols, w)?;
        Ok(self.push(
            out,
            Op::Normalize {
                scores: scores.index,
                mask: mask.to_vec(),
                z,
            },
            &[scores.index],
        ))
    }

    /// Per-row layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(&[x, gamma, beta])?;
        let xv = self.val(x.index);
        let (rows, cols) = (xv.rows(), xv.cols());
        let (g, b) = (self.val(gamma.index), self.val(beta.index));
        if g.len() != cols || b.len() != cols {
            return Err(Error::shape("layer_norm", "gain/bias width differs from input"));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..cols {
                let h = (r[j] - mean) * rs;
                xhat[i * cols + j] = h;
                out[i * cols + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = finite("layer_norm", Tensor::new(xv.shape().to_vec(), out)?)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.index,
                gamma: gamma.index,
                beta: beta.index,
                xhat,
                rstd,
            },
            &[x.index, gamma.index, beta.index],
        ))
    }

    /// Weighted mean of per-row softmax cross-entropy; a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        self.check(&[logits])?;
        let l = self.val(logits.index);
        let (rows, cols) = (l.rows(), l.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets / {} weights for {rows} rows", targets.len(), weights.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::shape("cross_entropy", format!("target {t} ≥ vocab {cols}")));
        }
        let total_weight: f64 = weights.iter().sum();
        if total_weight <= 0.0 {
            return Err(Error::shape("cross_entropy", "no weighted targets"));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for i in 0..rows {
            let r = l.row(i);
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|v| (v - m).exp()).sum();
            for j in 0..cols {
                probs[i * cols + j] = (r[j] - m).exp() / z;
            }
            if weights[i] != 0.0 {
                loss += weights[i] * (z.ln() + m - r[targets[i]]);
            }
        }
        let loss = loss / total_weight;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.index,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                total_weight,
            },
            &[logits.index],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let s = self.val(a.index).sum();
        let out = finite("sum", Tensor::scalar(s))?;
        Ok(self.push(out, Op::Sum(a.index), &[a.index]))
    }

    /// Accumulates `∂loss/∂node` for every ancestor of `loss`, then freezes
    /// the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(&[loss])?;
        let shape = self.val(loss.index).shape().to_vec();
        if self.val(loss.index).len() != 1 {
            return Err(Error::NotScalar(shape));
        }
        self.frozen = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.index] = Some(Tensor::filled(&shape, 1.0));

        for n in (0..=loss.index).rev() {
            if !self.nodes[n].needs_grad {
                continue;
            }
            let Some(g) = self.grads[n].take() else {
                continue;
            };
            self.propagate(n, &g);
            self.grads[n] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, n: usize, g: &Tensor) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[n];
        let gd = g.data();

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, nn) = (av.rows(), av.cols(), bv.cols());
                if let Some(da) = slot(nodes, grads, *a) {
                    gemm(m, nn, k, gd, (nn, 1), bv.data(), (1, nn), da, true);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    gemm(k, m, nn, av.data(), (1, k), gd, (nn, 1), db, true);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, nn) = (av.rows(), av.cols(), bv.rows());
                if let Some(da) = slot(nodes, grads, *a) {
                    gemm(m, nn, k, gd, (nn, 1), bv.data(), (k, 1), da, true);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    gemm(nn, m, k, gd, (1, nn), av.data(), (k, 1), db, true);
                }
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(da) = slot(nodes, grads, *a) {
                    da.iter_mut().zip(gd).for_each(|(d, v)| *d += v);
                }
                let cols = node.value.cols();
                if let Some(db) = slot(nodes, grads, *b) {
                    for (i, v) in gd.iter().enumerate() {
                        db[bc.index(i, cols)] += sign * v;
                    }
                }
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                let cols = node.value.cols();
                if let Some(da) = slot(nodes, grads, *a) {
                    for (i, v) in gd.iter().enumerate() {
                        da[i] += v * bv[bc.index(i, cols)];
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for (i, v) in gd.iter().enumerate() {
                        db[bc.index(i, cols)] += v * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    da.iter_mut().zip(gd).for_each(|(d, v)| *d += c * v);
                }
            }
            Op::Exp(a) => {
                let out = node.value.data();
                if let Some(da) = slot(nodes, grads, *a) {
                    for i in 0..gd.len() {
                        da[i] += gd[i] * out[i];
                    }
                }
            }
            Op::Square(a) => {
                let av = nodes[*a].value.data();
                if let Some(da) = slot(nodes, grads, *a) {
                    for i in 0..gd.len() {
                        da[i] += 2.0 * av[i] * gd[i];
                    }
                }
            }
            Op::Relu(a) => {
                let av = nodes[*a].value.data();
                if let Some(da) = slot(nodes, grads, *a) {
                    for i in 0..gd.len() {
                        if av[i] > 0.0 {
                            da[i] += gd[i];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                if let Some(da) = slot(nodes, grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] += gd[i * c + j];
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.value.cols();
                if let Some(da) = slot(nodes, grads, *a) {
                    let off = start * c;
                    da[off..off + gd.len()].iter_mut().zip(gd).for_each(|(d, v)| *d += v);
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let pc = nodes[*a].value.cols();
                if let Some(da) = slot(nodes, grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * pc + start + j] += gd[i * c + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if let Some(dp) = slot(nodes, grads, p) {
                        dp.iter_mut().zip(&gd[off..off + len]).for_each(|(d, v)| *d += v);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let mut col = 0;
                for &p in parts {
                    let pc = nodes[p].value.cols();
                    if let Some(dp) = slot(nodes, grads, p) {
                        for i in 0..r {
                            for j in 0..pc {
                                dp[i * pc + j] += gd[i * c + col + j];
                            }
                        }
                    }
                    col += pc;
                }
            }
            Op::GatherRows { table, index } => {
                let c = node.value.cols();
                if let Some(dt) = slot(nodes, grads, *table) {
                    for (i, &row) in index.iter().enumerate() {
                        for j in 0..c {
                            dt[row * c + j] += gd[i * c + j];
                        }
                    }
                }
            }
            Op::RelDot { coef, table, index } => {
                let (rows, cols) = (node.value.rows(), node.value.cols());
                let (cv, tv) = (&nodes[*coef].value, &nodes[*table].value);
                let d = cv.cols();
                if let Some(dc) = slot(nodes, grads, *coef) {
                    for i in 0..rows {
                        for j in 0..cols {
                            let gij = gd[i * cols + j];
                            let tr = tv.row(index[i * cols + j]);
                            for k in 0..d {
                                dc[i * d + k] += gij * tr[k];
                            }
                        }
                    }
                }
                if let Some(dt) = slot(nodes, grads, *table) {
                    for i in 0..rows {
                        let cr = cv.row(i);
                        for j in 0..cols {
                            let gij = gd[i * cols + j];
                            let r = index[i * cols + j];
                            for k in 0..d {
                                dt[r * d + k] += gij * cr[k];
                            }
                        }
                    }
                }
            }
            Op::SqDist(a, b) => {
                let (x, y) = (&nodes[*a].value, &nodes[*b].value);
                let (n_rows, m, d) = (x.rows(), y.rows(), x.cols());
                if let Some(da) = slot(nodes, grads, *a) {
                    for i in 0..n_rows {
                        for j in 0..m {
                            let gij = 2.0 * gd[i * m + j];
                            for k in 0..d {
                                da[i * d + k] += gij * (x.get(i, k) - y.get(j, k));
                            }
                        }
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for i in 0..n_rows {
                        for j in 0..m {
                            let gij = 2.0 * gd[i * m + j];
                            for k in 0..d {
                                db[j * d + k] -= gij * (x.get(i, k) - y.get(j, k));
                            }
                        }
                    }
                }
            }
            Op::Normalize { scores, mask, z } => {
                let (rows, cols) = (node.value.rows(), node.value.cols());
                let w = node.value.data();
                if let Some(ds) = slot(nodes, grads, *scores) {
                    for i in 0..rows {
                        let dot: f64 = (0..cols).map(|j| gd[i * cols + j] * w[i * cols + j]).sum();
                        for j in 0..cols {
                            if mask[i * cols + j] {
                                ds[i * cols + j] += (gd[i * cols + j] - dot) / z[i];
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = (node.value.rows(), node.value.cols());
                let gv = nodes[*gamma].value.data().to_vec();
                if let Some(dg) = slot(nodes, grads, *gamma) {
                    for i in 0..rows {
                        for j in 0..cols {
                            dg[j] += gd[i * cols + j] * xhat[i * cols + j];
                        }
                    }
                }
                if let Some(db) = slot(nodes, grads, *beta) {
                    for i in 0..rows {
                        for j in 0..cols {
                            db[j] += gd[i * cols + j];
                        }
                    }
                }
                if let Some(dx) = slot(nodes, grads, *x) {
                    let nf = cols as f64;
                    for i in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..cols {
                            let dh = gd[i * cols + j] * gv[j];
                            mean_d += dh;
                            mean_dx += dh * xhat[i * cols + j];
                        }
                        mean_d /= nf;
                        mean_dx /= nf;
                        for j in 0..cols {
                            let dh = gd[i * cols + j] * gv[j];
                            dx[i * cols + j] += rstd[i] * (dh - mean_d - xhat[i * cols + j] * mean_dx);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total_weight,
            } => {
                let cols = nodes[*logits].value.cols();
                let scale = gd[0] / total_weight;
                if let Some(dl) = slot(nodes, grads, *logits) {
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..cols {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[i * cols + j] += scale * w * (probs[i * cols + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    da.iter_mut().for_each(|d| *d += gd[0]);
                }
            }
        }
    }
}

/// Parent gradient buffer, created on first use; `None` when the parent does
/// not need one.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Tensor>], p: usize) -> Option<&'a mut [f64]> {
    if !nodes[p].needs_grad {
        return None;
    }
    Some(
        grads[p]
            .get_or_insert_with(|| Tensor::zeros(nodes[p].value.shape()))
            .data_mut(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, 9.0]]).unwrap());
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let a = tape.leaf(v(&[1.0, 2.0]));
        let sq = tape.mul(a, a).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(v(&[1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(Error::NotScalar(s)) if s == vec![2]));
    }

    #[test]
    fn foreign_variable_is_detached() {
        let mut other = Tape::new();
        let x = other.leaf(Tensor::scalar(1.0));
        let mut tape = Tape::new();
        assert!(matches!(tape.backward(x), Err(Error::Detached)));
        assert!(matches!(tape.exp(x), Err(Error::Detached)));
    }

    #[test]
    fn frozen_after_backward() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.is_frozen());
        assert!(matches!(tape.exp(a), Err(Error::TapeFrozen)));
        assert!(matches!(tape.backward(s), Err(Error::TapeFrozen)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(v(&[1.0, 2.0]));
        let c = tape.constant(v(&[3.0, 4.0]));
        let p = tape.mul(a, c).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn shared_leaf_accumulates() {
        // d/dw of sum(x·w · (x·w)) with w used twice through one leaf.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
        let w = tape.leaf(Tensor::from_rows(&[&[3.0], &[-1.0]]).unwrap());
        let a = tape.matmul(x, w).unwrap();
        let b = tape.matmul(x, w).unwrap();
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        // s = (x·w)², ds/dw = 2 (x·w) x = 2·1·[1, 2]
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(v(&[800.0]));
        assert!(matches!(tape.exp(a), Err(Error::Overflow { .. })));
    }

    #[test]
    fn normalize_rejects_negative_and_empty_rows() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::from_rows(&[&[1.0, -1.0]]).unwrap());
        assert!(matches!(
            tape.normalize_masked(s, &[true, true], 1e-12),
            Err(Error::InvalidKernel { col: 1, .. })
        ));
        // the negative entry is fine once it is filtered out
        assert!(tape.normalize_masked(s, &[true, false], 1e-12).is_ok());
        assert!(matches!(
            tape.normalize_masked(s, &[false, false], 1e-12),
            Err(Error::EmptyVisibility { row: 0 })
        ));
        let zero = tape.constant(Tensor::from_rows(&[&[0.0, 0.0]]).unwrap());
        assert!(matches!(
            tape.normalize_masked(zero, &[true, true], 1e-12),
            Err(Error::DegenerateDenominator { .. })
        ));
    }
}
