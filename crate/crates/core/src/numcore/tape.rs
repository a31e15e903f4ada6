//! Record-and-replay reverse-mode differentiation over whole matrices.
//!
//! A [`Tape`] records one forward pass as a list of primitive operations.
//! [`Tape::backward`] walks that list in reverse, accumulating one gradient
//! contribution per recorded operand. Nodes created with [`Tape::constant`]
//! (and everything computed only from constants) are skipped, so inference
//! passes pay nothing for the backward machinery they never use.

use std::borrow::Cow;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows treated as one causal sequence by attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Var, Var),
    Smear {
        x: Var,
        mix: Var,
        segments: Vec<Segment>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        // per segment, per head: len×len row-stochastic (lower triangular) weights
        probs: Vec<Vec<f64>>,
    },
    LogSoftmaxPick {
        logits: Var,
        picks: Vec<(usize, usize)>,
        softmax: Vec<Vec<f64>>,
    },
    SumSquares(Var),
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Result of [`Tape::backward`]: one gradient slot per node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the output w.r.t. `var`; zero when `var` did not reach the output.
    pub fn wrt(&self, var: Var) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, var: Var) -> Matrix {
        self.grads[var.0].take().unwrap_or_else(|| {
            let (r, c) = self.shapes[var.0];
            Matrix::zeros(r, c)
        })
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = K * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn accumulate(grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
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

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value recorded");
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

    /// Differentiable leaf owning its value.
    pub fn var(&mut self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Differentiable leaf borrowing its value (e.g. a model parameter).
    pub fn var_ref(&mut self, value: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Sub(a, b), rg))
    }

    /// Adds the 1×cols row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(shape_err("add_row", av, bv));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Cow::Owned(out), Op::AddRow(a, bias), rg))
    }

    /// Row j becomes x[j] + mix ⊙ x[j−1], where x[j−1] is zero at each segment start.
    pub fn smear_rows(&mut self, x: Var, mix: Var, segments: &[Segment]) -> Result<Var> {
        let (xv, mv) = (self.value(x), self.value(mix));
        if mv.rows() != 1 || mv.cols() != xv.cols() {
            return Err(shape_err("smear_rows", xv, mv));
        }
        if segments.iter().any(|s| s.start + s.len > xv.rows()) {
            return Err(Error::Input("smear segments exceed row count".into()));
        }
        let mut out = xv.clone();
        for seg in segments {
            for j in seg.start + 1..seg.start + seg.len {
                let prev = xv.row(j - 1);
                for ((o, &p), &m) in out.row_mut(j).iter_mut().zip(prev).zip(mv.data()) {
                    *o += m * p;
                }
            }
        }
        let rg = self.rg(x) || self.rg(mix);
        Ok(self.push(
            Cow::Owned(out),
            Op::Smear {
                x,
                mix,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::Relu(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu(x).0);
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with 1×cols `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.shape() != (1, xv.cols()) || bv.shape() != (1, xv.cols()) {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let cols = xv.cols();
        let mut xhat = Matrix::zeros(xv.rows(), cols);
        let mut out = Matrix::zeros(xv.rows(), cols);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let xh = xhat.row(r);
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = xh[j] * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= tv.rows() {
                return Err(Error::Vocab {
                    id,
                    vocab: tv.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Cow::Owned(out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `a` stacked on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).vstack(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::ConcatRows(a, b), rg))
    }

    /// Multi-head causal self-attention core: softmax(QKᵀ/√d)·V per head,
    /// with attention confined to each segment and to earlier-or-equal rows.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(shape_err("causal_attention", qv, kv));
        }
        let dim = qv.cols();
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Input(format!("{dim} columns not divisible into {heads} heads")));
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if segments.iter().any(|s| s.start + s.len > qv.rows()) || covered > qv.rows() {
            return Err(Error::Input("attention segments exceed row count".into()));
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(qv.rows(), dim);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            for h in 0..heads {
                let off = h * dh;
                let n = seg.len;
                let mut p = vec![0.0; n * n];
                for i in 0..n {
                    let qi = &qv.row(seg.start + i)[off..off + dh];
                    let row = &mut p[i * n..i * n + i + 1];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kv.row(seg.start + j)[off..off + dh];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    for s in row.iter_mut() {
                        *s /= z;
                    }
                    let o = &mut out.row_mut(seg.start + i)[off..off + dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &vv.row(seg.start + j)[off..off + dh];
                        for (oo, vvv) in o.iter_mut().zip(vj) {
                            *oo += pij * vvv;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Cow::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Σ over `picks` of log-softmax(logits[row])[target], as a 1×1 node.
    pub fn log_softmax_pick(&mut self, logits: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let lv = self.value(logits);
        let mut total = 0.0;
        let mut softmax = Vec::with_capacity(picks.len());
        for &(row, target) in picks {
            if row >= lv.rows() {
                return Err(Error::Shape {
                    op: "log_softmax_pick",
                    left: lv.shape(),
                    right: (row, target),
                });
            }
            if target >= lv.cols() {
                return Err(Error::Vocab {
                    id: target,
                    vocab: lv.cols(),
                });
            }
            let r = lv.row(row);
            let (arg, max) = r
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
            let rest: f64 = r
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != arg)
                .map(|(_, x)| (x - max).exp())
                .sum();
            let log_z = rest.ln_1p();
            total += (r[target] - max) - log_z;
            softmax.push(r.iter().map(|x| ((x - max) - log_z).exp()).collect());
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("log_softmax_pick".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(Matrix::scalar(total)),
            Op::LogSoftmaxPick {
                logits,
                picks: picks.to_vec(),
                softmax,
            },
            rg,
        ))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        let rg = self.rg(a);
        self.push(Cow::Owned(Matrix::scalar(s)), Op::SumSquares(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Cow::Owned(Matrix::scalar(s)), Op::Sum(a), rg)
    }

    /// Replays the tape backward from the 1×1 node `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let ov = self.value(out);
        if ov.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: ov.shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Matrix::scalar(1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn backward_node(&self, node: &Node<'a>, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.matmul_nt(self.value(*b))?);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, self.value(*a).matmul_tn(g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a·bᵀ: da = g·b, db = gᵀ·a
                if self.rg(*a) {
                    accumulate(grads, *a, g.matmul(self.value(*b))?);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.matmul_tn(self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::AddRow(a, bias) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*bias) {
                    accumulate(grads, *bias, Matrix::row_vector(&column_sums(g)));
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.scale(*s));
                }
            }
            Op::Relu(a) => {
                if self.rg(*a) {
                    let x = self.value(*a);
                    let d = x.data().iter().zip(g.data()).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 });
                    accumulate(grads, *a, Matrix::from_vec(x.rows(), x.cols(), d.collect())?);
                }
            }
            Op::Gelu(a) => {
                if self.rg(*a) {
                    let x = self.value(*a);
                    let d = x.data().iter().zip(g.data()).map(|(&x, &g)| g * gelu(x).1);
                    accumulate(grads, *a, Matrix::from_vec(x.rows(), x.cols(), d.collect())?);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let cols = xhat.cols();
                if self.rg(*gain) {
                    let mut dg = vec![0.0; cols];
                    for r in 0..xhat.rows() {
                        for ((d, gg), xh) in dg.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *d += gg * xh;
                        }
                    }
                    accumulate(grads, *gain, Matrix::row_vector(&dg));
                }
                if self.rg(*bias) {
                    accumulate(grads, *bias, Matrix::row_vector(&column_sums(g)));
                }
                if self.rg(*x) {
                    let mut dx = Matrix::zeros(xhat.rows(), cols);
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let xh = xhat.row(r);
                        for ((d, gg), w) in dxhat.iter_mut().zip(g.row(r)).zip(gv.data()) {
                            *d = gg * w;
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, d), h) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
                            *o = inv * (d - mean_d - h * mean_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, gg) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += gg;
                        }
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).rows();
                if self.rg(*a) {
                    accumulate(grads, *a, g.slice_rows(0, split));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.slice_rows(split, g.rows()));
                }
            }
            Op::Smear { x, mix, segments } => {
                let (xv, mv) = (self.value(*x), self.value(*mix));
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for seg in segments {
                        for j in seg.start + 1..seg.start + seg.len {
                            let gj = g.row(j);
                            for ((d, &gv), &m) in dx.row_mut(j - 1).iter_mut().zip(gj).zip(mv.data()) {
                                *d += m * gv;
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.rg(*mix) {
                    let mut dm = vec![0.0; mv.cols()];
                    for seg in segments {
                        for j in seg.start + 1..seg.start + seg.len {
                            for ((d, &gv), &p) in dm.iter_mut().zip(g.row(j)).zip(xv.row(j - 1)) {
                                *d += gv * p;
                            }
                        }
                    }
                    accumulate(grads, *mix, Matrix::row_vector(&dm));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let dim = qv.cols();
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(qv.rows(), dim);
                let mut dk = Matrix::zeros(qv.rows(), dim);
                let mut dv = Matrix::zeros(qv.rows(), dim);
                let mut ds = Vec::new();
                for (si, seg) in segments.iter().enumerate() {
                    let n = seg.len;
                    for h in 0..*heads {
                        let p = &probs[si * heads + h];
                        let off = h * dh;
                        ds.clear();
                        ds.resize(n, 0.0);
                        for i in 0..n {
                            let gi = &g.row(seg.start + i)[off..off + dh];
                            let pr = &p[i * n..i * n + i + 1];
                            // dp_ij = g_i · v_j ; dv_j += p_ij g_i
                            let mut dot = 0.0;
                            for (j, &pij) in pr.iter().enumerate() {
                                let vj = &vv.row(seg.start + j)[off..off + dh];
                                let dp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                ds[j] = dp;
                                dot += pij * dp;
                                let dvj = &mut dv.row_mut(seg.start + j)[off..off + dh];
                                for (d, gg) in dvj.iter_mut().zip(gi) {
                                    *d += pij * gg;
                                }
                            }
                            for (j, &pij) in pr.iter().enumerate() {
                                let s = pij * (ds[j] - dot) * scale;
                                if s == 0.0 {
                                    continue;
                                }
                                let kj = &kv.row(seg.start + j)[off..off + dh];
                                let dqi = &mut dq.row_mut(seg.start + i)[off..off + dh];
                                for (d, kk) in dqi.iter_mut().zip(kj) {
                                    *d += s * kk;
                                }
                                let qi = &qv.row(seg.start + i)[off..off + dh];
                                let dkj = &mut dk.row_mut(seg.start + j)[off..off + dh];
                                for (d, qq) in dkj.iter_mut().zip(qi) {
                                    *d += s * qq;
                                }
                            }
                        }
                    }
                }
                if self.rg(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.rg(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.rg(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::LogSoftmaxPick {
                logits,
                picks,
                softmax,
            } => {
                if self.rg(*logits) {
                    let gs = g.data()[0];
                    let lv = self.value(*logits);
                    let mut dl = Matrix::zeros(lv.rows(), lv.cols());
                    for (&(row, target), sm) in picks.iter().zip(softmax) {
                        let d = dl.row_mut(row);
                        for (o, p) in d.iter_mut().zip(sm) {
                            *o -= gs * p;
                        }
                        d[target] += gs;
                    }
                    accumulate(grads, *logits, dl);
                }
            }
            Op::SumSquares(a) => {
                if self.rg(*a) {
                    let gs = g.data()[0];
                    accumulate(grads, *a, self.value(*a).scale(2.0 * gs));
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let av = self.value(*a);
                    accumulate(grads, *a, Matrix::filled(av.rows(), av.cols(), g.data()[0]));
                }
            }
        }
        Ok(())
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, x) in out.iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    out
}
