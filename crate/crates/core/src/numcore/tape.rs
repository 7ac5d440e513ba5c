//! Reverse-mode differentiation over dense tensors.
//!
//! Operations are recorded in execution order, so the node list is already
//! topologically sorted: every node's inputs precede it. `backward` sweeps the
//! list once in reverse and accumulates adjoints.

use crate::error::{HienError, Result};
use crate::numcore::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Concat,
    Sum,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Sigmoid,
    /// PReLU with a fixed slope. Learnable slopes go through [`Tape::prelu`].
    Prelu(f64),
    Softmax,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MulCol(Var, Var),
    Sum(Var),
    SumSquares(Var),
    Dot(Var, Var),
    RowDot(Var, Var),
    Concat(Vec<Var>),
    SliceLast { x: Var, start: usize },
    Reshape(Var),
    Gather { table: Var, idx: Vec<usize> },
    Scatter { x: Var, idx: Vec<usize> },
    Sigmoid(Var),
    Prelu { x: Var, slope: Var },
    Softmax(Var),
    SoftmaxRows(Var),
    Bce { p: Var, labels: Vec<f64> },
    BceLogits { z: Var, labels: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-12;

/// Single-owner recording of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes ownership of an adjoint, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn require_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(HienError::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Constants and parameters are both leaves; a leaf
    /// simply receives whatever adjoint flows into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(HienError::dim("matmul", ta.shape(), tb.shape()));
        }
        let (m, k) = ta.dims2();
        let n = tb.shape()[1];
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `x · wᵀ` for `x: [n × in]` and `w: [out × in]`: applies the matrix `w`
    /// to every row of `x`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 2 || tw.rank() != 2 || tx.shape()[1] != tw.shape()[1] {
            return Err(HienError::dim("linear", tx.shape(), tw.shape()));
        }
        let (n, din) = tx.dims2();
        let dout = tw.shape()[0];
        let mut out = vec![0.0; n * dout];
        let (xd, wd) = (tx.data(), tw.data());
        for i in 0..n {
            let xr = &xd[i * din..(i + 1) * din];
            for o in 0..dout {
                let wr = &wd[o * din..(o + 1) * din];
                out[i * dout + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        let value = Tensor::matrix(n, dout, out)?;
        Ok(self.push(value, Op::Linear(x, w)))
    }

    fn binary(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let name = match op {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            _ => "mul",
        };
        require_same(name, ta, tb)?;
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| match op {
                Elementwise::Add => x + y,
                Elementwise::Sub => x - y,
                _ => x * y,
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let node = match op {
            Elementwise::Add => Op::Add(a, b),
            Elementwise::Sub => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(value, node))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    /// Dispatches one of the elementwise family. `sum` ignores `b`; the
    /// others require it.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need = |b: Option<Var>| b.ok_or(HienError::EmptyInput("elementwise rhs"));
        match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => {
                let b = need(b)?;
                self.binary(op, a, b)
            }
            Elementwise::Concat => {
                let b = need(b)?;
                self.concat(&[a, b])
            }
            Elementwise::Dot => {
                let b = need(b)?;
                self.dot(a, b)
            }
            Elementwise::Sum => self.sum(a),
        }
    }

    /// Adds the vector `b: [m]` to every row of `x: [n × m]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (n, m) = tx.dims2();
        if tx.rank() != 2 || tb.numel() != m {
            return Err(HienError::dim("add_row", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for i in 0..n {
            for (o, bv) in data[i * m..(i + 1) * m].iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(x, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Scale(x, c)))
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if !ts.is_scalar() {
            return Err(HienError::dim("mul_scalar", tx.shape(), ts.shape()));
        }
        let c = ts.item();
        let data = tx.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulScalar(x, s)))
    }

    /// Scales row `i` of `x: [n × k]` by `s[i]`, where `s` holds `n` values.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (n, k) = tx.dims2();
        if tx.rank() != 2 || ts.numel() != n {
            return Err(HienError::dim("mul_col", tx.shape(), ts.shape()));
        }
        let mut data = tx.data().to_vec();
        for (i, sv) in ts.data().iter().enumerate() {
            for o in &mut data[i * k..(i + 1) * k] {
                *o *= sv;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulCol(x, s)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum(x)))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum_squares();
        Ok(self.push(Tensor::scalar(total), Op::SumSquares(x)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() > 1 || tb.rank() > 1 || ta.numel() != tb.numel() {
            return Err(HienError::dim("dot", ta.shape(), tb.shape()));
        }
        let total = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(total), Op::Dot(a, b)))
    }

    /// Row-wise inner products of two `[n × k]` matrices, as `[n × 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_same("row_dot", ta, tb)?;
        if ta.rank() != 2 {
            return Err(HienError::dim("row_dot", ta.shape(), tb.shape()));
        }
        let (n, k) = ta.dims2();
        let data = (0..n)
            .map(|i| {
                ta.data()[i * k..(i + 1) * k]
                    .iter()
                    .zip(&tb.data()[i * k..(i + 1) * k])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let value = Tensor::matrix(n, 1, data)?;
        Ok(self.push(value, Op::RowDot(a, b)))
    }

    /// Joins along the last axis. Vectors concatenate end to end; matrices
    /// must agree on row count and are joined column-wise.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(HienError::EmptyInput("concat"))?;
        let rank = self.value(first).rank();
        let rows = self.value(first).dims2().0;
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != rank || t.dims2().0 != rows || rank > 2 {
                return Err(HienError::dim("concat", self.value(first).shape(), t.shape()));
            }
            cols += t.dims2().1;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if rank == 2 { vec![rows, cols] } else { vec![cols] };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..start+len` of a matrix (or elements of a vector).
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        if tx.rank() == 0 || tx.rank() > 2 || start + len > cols {
            return Err(HienError::dim("slice", tx.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let shape = if tx.rank() == 2 { vec![rows, len] } else { vec![len] };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SliceLast { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Selects rows of `table: [v × k]`; backward scatters into those rows only.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(HienError::dim("gather", tt.shape(), &[idx.len()]));
        }
        let (v, k) = tt.dims2();
        let mut data = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            if i >= v {
                return Err(HienError::Bounds {
                    field: "gather".into(),
                    index: i,
                    vocab: v,
                });
            }
            data.extend_from_slice(tt.row(i));
        }
        let value = Tensor::matrix(idx.len(), k, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Sums row `i` of `x: [n × k]` into output row `idx[i]` of a
    /// `[rows × k]` result (segment sum).
    pub fn scatter(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, k) = tx.dims2();
        if tx.rank() != 2 || idx.len() != n {
            return Err(HienError::dim("scatter", tx.shape(), &[idx.len()]));
        }
        let mut data = vec![0.0; rows * k];
        for (i, &r) in idx.iter().enumerate() {
            if r >= rows {
                return Err(HienError::Bounds {
                    field: "scatter".into(),
                    index: r,
                    vocab: rows,
                });
            }
            for (o, xv) in data[r * k..(r + 1) * k].iter_mut().zip(tx.row(i)) {
                *o += xv;
            }
        }
        let value = Tensor::matrix(rows, k, data)?;
        Ok(self.push(
            value,
            Op::Scatter {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        match kind {
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Prelu(slope) => {
                let s = self.leaf(Tensor::scalar(slope));
                self.prelu(x, s)
            }
            Activation::Softmax => self.softmax(x),
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sigmoid(x)))
    }

    /// `x` where non-negative, `slope · x` elsewhere; `slope` is a
    /// single-element tensor so it can be trained.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(slope));
        if !ts.is_scalar() {
            return Err(HienError::dim("prelu", tx.shape(), ts.shape()));
        }
        let a = ts.item();
        let data = tx
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { a * v })
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Prelu { x, slope }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() == 0 || tx.rank() > 1 {
            return Err(HienError::EmptyInput("softmax"));
        }
        let mut data = tx.data().to_vec();
        softmax_in_place(&mut data);
        let value = Tensor::vector(data);
        Ok(self.push(value, Op::Softmax(x)))
    }

    /// Independent softmax over each row of a `[n × f]` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, f) = tx.dims2();
        if tx.rank() != 2 || f == 0 {
            return Err(HienError::EmptyInput("softmax_rows"));
        }
        let mut data = tx.data().to_vec();
        for i in 0..n {
            softmax_in_place(&mut data[i * f..(i + 1) * f]);
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::SoftmaxRows(x)))
    }

    /// Mean binary cross-entropy of probabilities `p` against `labels`.
    /// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`; clamped
    /// entries contribute no gradient.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let tp = self.value(p);
        if tp.numel() != labels.len() {
            return Err(HienError::dim("bce", tp.shape(), &[labels.len()]));
        }
        if labels.is_empty() {
            return Err(HienError::EmptyInput("bce"));
        }
        if let Some(bad) = tp.data().iter().find(|v| !v.is_finite()) {
            return Err(HienError::Numeric(format!("non-finite prediction {bad}")));
        }
        let total: f64 = tp
            .data()
            .iter()
            .zip(labels)
            .map(|(&q, &y)| {
                let q = q.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum();
        let value = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            value,
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(z)` computed from the logits
    /// as `softplus(z) − y z`, which stays exact where the probability
    /// rounds to 0 or 1.
    pub fn bce_logits(&mut self, z: Var, labels: &[f64]) -> Result<Var> {
        let tz = self.value(z);
        if tz.numel() != labels.len() {
            return Err(HienError::dim("bce_logits", tz.shape(), &[labels.len()]));
        }
        if labels.is_empty() {
            return Err(HienError::EmptyInput("bce_logits"));
        }
        if let Some(bad) = tz.data().iter().find(|v| !v.is_finite()) {
            return Err(HienError::Numeric(format!("non-finite logit {bad}")));
        }
        let total: f64 = tz
            .data()
            .iter()
            .zip(labels)
            .map(|(&v, &y)| v.max(0.0) + (-v.abs()).exp().ln_1p() - y * v)
            .sum();
        let value = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            value,
            Op::BceLogits {
                z,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Clears a completed backward pass so `backward` may run again.
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    /// Reverse accumulation from the scalar `loss`. Every node reachable
    /// from the loss gets an adjoint; leaves that do not influence the loss
    /// get zeros of their own shape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(HienError::Tape("backward already ran on this tape; call reset first".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(HienError::Tape("loss does not belong to this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(HienError::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.backward_done = true;
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let like = |v: Var, data: Vec<f64>| -> Tensor {
            Tensor::new(self.value(v).shape().to_vec(), data).expect("adjoint shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let n = tb.dims2().1;
                let (gd, ad, bd) = (g.data(), ta.data(), tb.data());
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for r in 0..m {
                    let grow = &gd[r * n..(r + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        let av = ad[r * k + p];
                        for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
                acc(grads, *a, like(*a, da));
                acc(grads, *b, like(*b, db));
            }
            Op::Linear(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, din) = tx.dims2();
                let dout = tw.dims2().0;
                let (gd, xd, wd) = (g.data(), tx.data(), tw.data());
                let mut dx = vec![0.0; n * din];
                let mut dw = vec![0.0; dout * din];
                for r in 0..n {
                    let xr = &xd[r * din..(r + 1) * din];
                    let dxr = &mut dx[r * din..(r + 1) * din];
                    for o in 0..dout {
                        let gv = gd[r * dout + o];
                        if gv == 0.0 {
                            continue;
                        }
                        let wr = &wd[o * din..(o + 1) * din];
                        for (d, wv) in dxr.iter_mut().zip(wr) {
                            *d += gv * wv;
                        }
                        for (d, xv) in dw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                            *d += gv * xv;
                        }
                    }
                }
                acc(grads, *x, like(*x, dx));
                acc(grads, *w, like(*w, dw));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, like(*b, g.data().iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                acc(grads, *a, like(*a, da));
                acc(grads, *b, like(*b, db));
            }
            Op::AddRow(x, b) => {
                acc(grads, *x, g.clone());
                let (n, m) = g.dims2();
                let mut db = vec![0.0; m];
                for r in 0..n {
                    for (d, gv) in db.iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                acc(grads, *b, like(*b, db));
            }
            Op::Scale(x, c) => {
                acc(grads, *x, like(*x, g.data().iter().map(|v| v * c).collect()));
            }
            Op::MulScalar(x, s) => {
                let c = self.value(*s).item();
                let tx = self.value(*x);
                acc(grads, *x, like(*x, g.data().iter().map(|v| v * c).collect()));
                let ds: f64 = g.data().iter().zip(tx.data()).map(|(a, b)| a * b).sum();
                acc(grads, *s, like(*s, vec![ds]));
            }
            Op::MulCol(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let (n, k) = tx.dims2();
                let mut dx = g.data().to_vec();
                let mut ds = vec![0.0; n];
                for r in 0..n {
                    let sv = ts.data()[r];
                    let grow = &g.data()[r * k..(r + 1) * k];
                    ds[r] = grow.iter().zip(tx.row(r)).map(|(a, b)| a * b).sum();
                    for d in &mut dx[r * k..(r + 1) * k] {
                        *d *= sv;
                    }
                }
                acc(grads, *x, like(*x, dx));
                acc(grads, *s, like(*s, ds));
            }
            Op::Sum(x) => {
                let gv = g.item();
                acc(grads, *x, Tensor::filled(self.value(*x).shape(), gv));
            }
            Op::SumSquares(x) => {
                let gv = g.item();
                let tx = self.value(*x);
                acc(grads, *x, like(*x, tx.data().iter().map(|v| 2.0 * gv * v).collect()));
            }
            Op::Dot(a, b) => {
                let gv = g.item();
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(grads, *a, like(*a, tb.data().iter().map(|v| gv * v).collect()));
                acc(grads, *b, like(*b, ta.data().iter().map(|v| gv * v).collect()));
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = ta.dims2();
                let mut da = vec![0.0; n * k];
                let mut db = vec![0.0; n * k];
                for r in 0..n {
                    let gv = g.data()[r];
                    for c in 0..k {
                        da[r * k + c] = gv * tb.data()[r * k + c];
                        db[r * k + c] = gv * ta.data()[r * k + c];
                    }
                }
                acc(grads, *a, like(*a, da));
                acc(grads, *b, like(*b, db));
            }
            Op::Concat(parts) => {
                let rows = g.dims2().0;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    acc(grads, p, like(p, d));
                    offset += w;
                }
            }
            Op::SliceLast { x, start } => {
                let tx = self.value(*x);
                let (rows, cols) = tx.dims2();
                let len = g.dims2().1;
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                }
                acc(grads, *x, like(*x, d));
            }
            Op::Reshape(x) => {
                acc(grads, *x, like(*x, g.data().to_vec()));
            }
            Op::Gather { table, idx } => {
                let tt = self.value(*table);
                let (v, k) = tt.dims2();
                let mut d = vec![0.0; v * k];
                for (r, &i) in idx.iter().enumerate() {
                    for (o, gv) in d[i * k..(i + 1) * k].iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                acc(grads, *table, like(*table, d));
            }
            Op::Scatter { x, idx } => {
                let k = g.dims2().1;
                let mut d = Vec::with_capacity(idx.len() * k);
                for &r in idx {
                    d.extend_from_slice(g.row(r));
                }
                acc(grads, *x, like(*x, d));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                acc(grads, *x, like(*x, d));
            }
            Op::Prelu { x, slope } => {
                let a = self.value(*slope).item();
                let tx = self.value(*x);
                let mut ds = 0.0;
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, &xv)| {
                        if xv >= 0.0 {
                            *gv
                        } else {
                            ds += gv * xv;
                            gv * a
                        }
                    })
                    .collect();
                acc(grads, *x, like(*x, d));
                acc(grads, *slope, like(*slope, vec![ds]));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let inner: f64 = g.data().iter().zip(y).map(|(a, b)| a * b).sum();
                let d = g.data().iter().zip(y).map(|(gv, yv)| yv * (gv - inner)).collect();
                acc(grads, *x, like(*x, d));
            }
            Op::SoftmaxRows(x) => {
                let (n, f) = node.value.dims2();
                let y = node.value.data();
                let mut d = vec![0.0; n * f];
                for r in 0..n {
                    let yr = &y[r * f..(r + 1) * f];
                    let gr = &g.data()[r * f..(r + 1) * f];
                    let inner: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..f {
                        d[r * f + c] = yr[c] * (gr[c] - inner);
                    }
                }
                acc(grads, *x, like(*x, d));
            }
            Op::Bce { p, labels } => {
                let gv = g.item() / labels.len() as f64;
                let tp = self.value(*p);
                let d = tp
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&q, &y)| {
                        if q <= PROB_EPS || q >= 1.0 - PROB_EPS {
                            0.0
                        } else {
                            -gv * (y / q - (1.0 - y) / (1.0 - q))
                        }
                    })
                    .collect();
                acc(grads, *p, like(*p, d));
            }
            Op::BceLogits { z, labels } => {
                let gv = g.item() / labels.len() as f64;
                let d = self
                    .value(*z)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&v, &y)| gv * (sigmoid(v) - y))
                    .collect();
                acc(grads, *z, like(*z, d));
            }
        }
    }
}
