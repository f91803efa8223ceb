//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`GradTape`] records every operation as a node whose inputs precede it,
//! so the node vector is already in topological order and [`GradTape::backward`]
//! is a single reverse sweep. Parameters registered with [`GradTape::leaf`]
//! are trainable; everything registered with [`GradTape::constant`] is frozen
//! and never allocates gradient storage.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, softmax_in_place, Tensor};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Gelu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<Vec<f64>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    ColMean(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`GradTape::backward`], stored for leaves only.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `leaf`; zeros if the leaf is not
    /// on any path to the loss.
    pub fn wrt(&self, leaf: Var) -> Tensor {
        match self.grads.get(leaf.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[leaf.0]),
        }
    }

    pub fn has_storage(&self, v: Var) -> bool {
        self.grads.get(v.0).is_some_and(Option::is_some)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a trainable tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_shared(t, Op::Leaf, true)
    }

    /// Registers a frozen tensor.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_shared(t, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op_name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Adds a `[1×m]` row to every row of an `[n×m]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let mut out = ta.clone();
        let c = ta.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tr.data()[i % c];
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Scales row `i` of an `[n×m]` matrix by entry `i` of an `[n×1]` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(shape_err("mul_col", ta, tc));
        }
        let mut out = ta.clone();
        let c = ta.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= tc.data()[i / c];
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(out, Op::MulCol(a, col), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.numel() != c || tb.numel() != c {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(tx.shape());
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            let o = out.row_mut(r);
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[r * c + j] = h;
                o[j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[N × d]`; `segments` lists `(start_row, len)` of
    /// each sequence so attention never crosses sequence boundaries.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(shape_err("causal_attention", tq, tk));
        }
        let d = tq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {d} not divisible into {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(tq.shape());
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in segments {
            if start + len > tq.rows() {
                return Err(Error::InvalidArgument("attention segment out of range".into()));
            }
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; len * len];
                for i in 0..len {
                    let qi = &tq.row(start + i)[off..off + dh];
                    let pr = &mut p[i * len..i * len + i + 1];
                    for (j, s) in pr.iter_mut().enumerate() {
                        let kj = &tk.row(start + j)[off..off + dh];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(pr);
                    let orow = &mut out.row_mut(start + i)[off..off + dh];
                    for (j, &w) in pr.iter().enumerate() {
                        let vj = &tv.row(start + j)[off..off + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean next-token cross-entropy over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        if targets.len() != tl.rows() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let c = tl.cols();
        let mut probs = tl.data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * c..(r + 1) * c];
            softmax_in_place(row);
            if let Some(t) = *t {
                if t >= c {
                    return Err(Error::TokenOutOfRange { token: t, vocab: c });
                }
                total -= row[t].max(f64::MIN_POSITIVE).ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyInput("cross_entropy targets"));
        }
        let loss = total / count as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Selects rows by index (rows may repeat). Also serves as embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= ta.rows() {
                return Err(Error::InvalidArgument(format!(
                    "row {i} out of range for {} rows",
                    ta.rows()
                )));
            }
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Places row `r` of `a` at row `idx[r]` of a zero `[rows × m]` matrix,
    /// summing collisions.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let ta = self.value(a);
        if idx.len() != ta.rows() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::InvalidArgument("scatter_rows index mismatch".into()));
        }
        let c = ta.cols();
        let mut out = Tensor::zeros(&[rows, c]);
        for (r, &i) in idx.iter().enumerate() {
            for (o, x) in out.row_mut(i).iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::ScatterRows(a, idx.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(shape_err("concat_cols", ta, tb));
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.rows() * (ca + cb));
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor::matrix(ta.rows(), ca + cb, data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if start >= end || end > ta.cols() {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{end} of {:?}",
                ta.shape()
            )));
        }
        let mut data = Vec::with_capacity(ta.rows() * (end - start));
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row(r)[start..end]);
        }
        let out = Tensor::matrix(ta.rows(), end - start, data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over rows, giving a `[1×m]` row.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|v| *v /= r.max(1) as f64);
        let rg = self.rg(a);
        self.push(Tensor::row_vector(out), Op::ColMean(a), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
        }
        // Drop anything that is not a leaf so frozen or intermediate nodes
        // carry no gradient storage.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), tb.data(), (1, n), &mut da, false);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da));
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), (1, k), g.data(), (n, 1), &mut db, false);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, db));
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.rg(*a) {
                    // dA = dC · B
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), tb.data(), (k, 1), &mut da, false);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da));
                }
                if self.rg(*b) {
                    // dB = dCᵀ · A
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), (1, n), ta.data(), (k, 1), &mut db, false);
                    self.accumulate(grads, *b, Tensor::matrix(n, k, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    let c = g.cols();
                    let mut d = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (o, x) in d.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, d).unwrap());
                }
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (self.value(*a), self.value(*col));
                let c = ta.cols();
                if self.rg(*a) {
                    let mut d = g.clone();
                    for (j, v) in d.data_mut().iter_mut().enumerate() {
                        *v *= tc.data()[j / c];
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*col) {
                    let d = (0..ta.rows())
                        .map(|r| g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *col, Tensor::new(tc.shape().to_vec(), d).unwrap());
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(gy, &x)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = g.data().iter().zip(y.data()).map(|(gy, t)| gy * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::SoftmaxRows(a) => {
                let p = &node.value;
                let mut d = g.clone();
                for r in 0..p.rows() {
                    let pr = p.row(r);
                    let dot: f64 = g.row(r).iter().zip(pr).map(|(x, y)| x * y).sum();
                    for (o, (&gy, &py)) in d.row_mut(r).iter_mut().zip(g.row(r).iter().zip(pr)) {
                        *o = py * (gy - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gain);
                let c = g.cols();
                let rows = g.rows();
                if self.rg(*bias) || self.rg(*gain) {
                    let mut db = vec![0.0; c];
                    let mut dg = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            db[j] += g.row(r)[j];
                            dg[j] += g.row(r)[j] * xhat[r * c + j];
                        }
                    }
                    let gs = tg.shape().to_vec();
                    let bs = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::new(gs, dg).unwrap());
                    self.accumulate(grads, *bias, Tensor::new(bs, db).unwrap());
                }
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(g.shape());
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * c..(r + 1) * c];
                        let dxh: Vec<f64> = (0..c).map(|j| gr[j] * tg.data()[j]).collect();
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let o = dx.row_mut(r);
                        for j in 0..c {
                            o[j] = rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = tq.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(tq.shape());
                let mut dk = Tensor::zeros(tk.shape());
                let mut dv = Tensor::zeros(tv.shape());
                let mut pi = 0;
                for &(start, len) in segments {
                    for h in 0..*heads {
                        let off = h * dh;
                        let p = &probs[pi];
                        pi += 1;
                        for i in 0..len {
                            let go = &g.row(start + i)[off..off + dh];
                            let pr = &p[i * len..i * len + i + 1];
                            // dP_ij = dO_i · V_j
                            let dp: Vec<f64> = (0..=i)
                                .map(|j| {
                                    let vj = &tv.row(start + j)[off..off + dh];
                                    go.iter().zip(vj).map(|(a, b)| a * b).sum()
                                })
                                .collect();
                            let dot: f64 = dp.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for j in 0..=i {
                                let w = pr[j];
                                // dV_j += P_ij · dO_i
                                for (o, x) in dv.row_mut(start + j)[off..off + dh].iter_mut().zip(go) {
                                    *o += w * x;
                                }
                                let ds = w * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for t in 0..dh {
                                    let kj = tk.row(start + j)[off + t];
                                    let qi = tq.row(start + i)[off + t];
                                    dq.row_mut(start + i)[off + t] += ds * kj;
                                    dk.row_mut(start + j)[off + t] += ds * qi;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let tl = self.value(*logits);
                let c = tl.cols();
                let s = g.data()[0] / *count as f64;
                let mut d = Tensor::zeros(tl.shape());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let o = d.row_mut(r);
                        for j in 0..c {
                            o[j] = probs[r * c + j] * s;
                        }
                        o[t] -= s;
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::GatherRows(a, idx) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, x) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ScatterRows(a, idx) => {
                let c = g.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    data.extend_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, Tensor::matrix(idx.len(), c, data));
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = g.rows();
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    da.extend_from_slice(&g.row(r)[..ca]);
                    db.extend_from_slice(&g.row(r)[ca..]);
                }
                self.accumulate(grads, *a, Tensor::matrix(rows, ca, da));
                self.accumulate(grads, *b, Tensor::matrix(rows, cb, db));
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(ta.shape(), g.data()[0]));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let v = g.data()[0] / ta.numel().max(1) as f64;
                self.accumulate(grads, *a, Tensor::full(ta.shape(), v));
            }
            Op::ColMean(a) => {
                let ta = self.value(*a);
                let r = ta.rows().max(1) as f64;
                let mut d = Tensor::zeros(ta.shape());
                for i in 0..ta.rows() {
                    for (o, x) in d.row_mut(i).iter_mut().zip(g.data()) {
                        *o = x / r;
                    }
                }
                self.accumulate(grads, *a, d);
            }
        }
    }
}
