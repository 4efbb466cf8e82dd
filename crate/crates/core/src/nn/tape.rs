//! Reverse-mode autodiff over a linear tape.
//!
//! A [`Tape`] borrows the parameter store, records every operation of one
//! forward pass, and replays them backwards. Parameter gradients land in a
//! [`Gradients`] sink; gradients of tracked inputs are returned so callers
//! can differentiate with respect to non-parameter values.

use std::rc::Rc;

use rand::Rng as _;

use super::mat::{matmul, Mat};
use super::params::{Gradients, ParamId, ParamStore};
use crate::rng::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: Var },
    Gather { table: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    SumAll(Var),
    MulConst { x: Var, mask: Vec<f64> },
    L2NormRows { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SmoothL1 { x: Var, target: Vec<f64> },
    BceLogits { z: Var, labels: Vec<f64> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Option<Mat>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    dropout: Option<(f64, Rng)>,
}

/// Gradients of tracked inputs after a backward pass.
#[derive(Debug)]
pub struct InputGrads {
    grads: Vec<Option<Mat>>,
}

impl InputGrads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            dropout: None,
        }
    }

    /// Training-mode tape: [`Tape::dropout`] zeroes activations with
    /// probability `p` using `rng`.
    pub fn with_dropout(params: &'p ParamStore, p: f64, rng: Rng) -> Self {
        let mut t = Self::new(params);
        if p > 0.0 {
            t.dropout = Some((p, rng));
        }
        t
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.value(*id),
            _ => self.nodes[v.0].value.as_ref().expect("node without value"),
        }
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = matmul(self.value(a), ta, self.value(b), tb);
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let out = Mat::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Add a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, x.cols), "add_row shape mismatch");
        let mut out = x.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let out = Mat::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|p| scale * p + shift).collect();
        let out = Mat::from_vec(v.rows, v.cols, data);
        self.push(out, Op::Affine { x, scale }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&p| gelu(p)).collect();
        let out = Mat::from_vec(v.rows, v.cols, data);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Per-row standardization then `gain ⊙ x̂ + bias` (gain, bias: 1 × cols).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (v, g, b) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!((g.rows, g.cols), (1, v.cols));
        assert_eq!((b.rows, b.cols), (1, v.cols));
        let n = v.cols as f64;
        let mut xhat = vec![0.0; v.len()];
        let mut inv_std = vec![0.0; v.rows];
        let mut out = Mat::zeros(v.rows, v.cols);
        for r in 0..v.rows {
            let row = v.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..v.cols {
                let h = (row[c] - mean) * is;
                xhat[r * v.cols + c] = h;
                out.data[r * v.cols + c] = g.data[c] * h + b.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    /// Row-wise softmax, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x), None);
        self.push(out, Op::Softmax { x }, &[x])
    }

    /// Row-wise softmax where `allowed[r * cols + c] == false` entries get
    /// probability exactly zero.
    pub fn masked_softmax(&mut self, x: Var, allowed: &Rc<Vec<bool>>) -> Var {
        let out = softmax_rows(self.value(x), Some(allowed));
        self.push(out, Op::Softmax { x }, &[x])
    }

    /// Rows `idx` of `table`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(idx.len(), t.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(out, Op::Gather { table, idx: idx.to_vec() }, &[table])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        assert!(start + len <= v.cols);
        let mut out = Mat::zeros(v.rows, len);
        for r in 0..v.rows {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// `1 × cols` mean over rows.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = Mat::zeros(1, v.cols);
        for r in 0..v.rows {
            for (o, p) in out.data.iter_mut().zip(v.row(r)) {
                *o += p;
            }
        }
        out.scale(1.0 / v.rows as f64);
        self.push(out, Op::MeanRows(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Mat::scalar(s), Op::SumAll(x), &[x])
    }

    /// Sum of 1×1 scalars.
    pub fn add_scalars(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Inverted dropout in training mode; identity otherwise.
    pub fn dropout(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let Some((p, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let p = *p;
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Mat::from_vec(v.rows, v.cols, data);
        self.push(out, Op::MulConst { x, mask }, &[x])
    }

    /// Each row divided by its L2 norm. Rows must be non-zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = v.clone();
        let mut norms = Vec::with_capacity(v.rows);
        for r in 0..v.rows {
            let n = v.row(r).iter().map(|p| p * p).sum::<f64>().sqrt();
            norms.push(n);
            out.row_mut(r).iter_mut().for_each(|p| *p /= n);
        }
        self.push(out, Op::L2NormRows { x, norms }, &[x])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let v = self.value(logits);
        assert_eq!(v.rows, targets.len(), "one target per row");
        let probs = softmax_rows(v, None);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < v.cols, "target {t} out of range {}", v.cols);
            let row = v.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|p| (p - m).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= targets.len() as f64;
        self.push(
            Mat::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs: probs.data },
            &[logits],
        )
    }

    /// Mean elementwise Huber loss (δ = 1) against a constant target.
    pub fn smooth_l1(&mut self, x: Var, target: &[f64]) -> Var {
        let v = self.value(x);
        assert_eq!(v.len(), target.len(), "smooth_l1 length mismatch");
        let loss = v.data.iter().zip(target).map(|(a, b)| huber(a - b)).sum::<f64>() / v.len() as f64;
        self.push(Mat::scalar(loss), Op::SmoothL1 { x, target: target.to_vec() }, &[x])
    }

    /// Summed binary cross-entropy of `sigmoid(z_i)` against `labels[i] ∈ [0, 1]`
    /// for a column (or any shape) of logits.
    pub fn bce_with_logits(&mut self, z: Var, labels: &[f64]) -> Var {
        let v = self.value(z);
        assert_eq!(v.len(), labels.len(), "one label per logit");
        let loss = v
            .data
            .iter()
            .zip(labels)
            .map(|(&x, &y)| y * softplus(-x) + (1.0 - y) * softplus(x))
            .sum();
        self.push(Mat::scalar(loss), Op::BceLogits { z, labels: labels.to_vec() }, &[z])
    }

    /// Same data, new row-major shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.len(), rows * cols, "reshape size mismatch");
        let out = Mat::from_vec(rows, cols, v.data.clone());
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Reverse pass from scalar `loss`, seeded with `seed` (∂out/∂loss).
    pub fn backward(&self, loss: Var, seed: f64, sink: &mut Gradients) -> InputGrads {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        let mut inputs: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(seed));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => inputs[i] = Some(g),
                Op::Param(id) => sink.add(*id, &g),
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        // C = op(A) op(B): dA = dC op(B)ᵀ, transposed back if ta
                        let da = if *ta { matmul(bv, *tb, &g, true) } else { matmul(&g, false, bv, !*tb) };
                        self.acc(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = if *tb { matmul(&g, true, av, *ta) } else { matmul(av, !*ta, &g, false) };
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, g.clone());
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let mut dr = Mat::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (o, p) in dr.data.iter_mut().zip(g.row(r)) {
                                *o += p;
                            }
                        }
                        self.acc(&mut grads, *row, dr);
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let d = g.data.iter().zip(&bv.data).map(|(p, q)| p * q).collect();
                        self.acc(&mut grads, *a, Mat::from_vec(g.rows, g.cols, d));
                    }
                    if self.needs(*b) {
                        let d = g.data.iter().zip(&av.data).map(|(p, q)| p * q).collect();
                        self.acc(&mut grads, *b, Mat::from_vec(g.rows, g.cols, d));
                    }
                }
                Op::Affine { x, scale } => {
                    let mut d = g;
                    d.scale(*scale);
                    self.acc(&mut grads, *x, d);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let d = g.data.iter().zip(&xv.data).map(|(p, &q)| p * gelu_grad(q)).collect();
                    self.acc(&mut grads, *x, Mat::from_vec(g.rows, g.cols, d));
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain);
                    let cols = g.cols;
                    if self.needs(*gain) || self.needs(*bias) {
                        let mut dg = Mat::zeros(1, cols);
                        let mut db = Mat::zeros(1, cols);
                        for r in 0..g.rows {
                            for c in 0..cols {
                                let gr = g.data[r * cols + c];
                                dg.data[c] += gr * xhat[r * cols + c];
                                db.data[c] += gr;
                            }
                        }
                        if self.needs(*gain) {
                            self.acc(&mut grads, *gain, dg);
                        }
                        if self.needs(*bias) {
                            self.acc(&mut grads, *bias, db);
                        }
                    }
                    if self.needs(*x) {
                        let n = cols as f64;
                        let mut dx = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for c in 0..cols {
                                let dh = g.data[r * cols + c] * gv.data[c];
                                mean_dh += dh;
                                mean_dh_h += dh * xhat[r * cols + c];
                            }
                            mean_dh /= n;
                            mean_dh_h /= n;
                            for c in 0..cols {
                                let dh = g.data[r * cols + c] * gv.data[c];
                                dx.data[r * cols + c] =
                                    inv_std[r] * (dh - mean_dh - xhat[r * cols + c] * mean_dh_h);
                            }
                        }
                        self.acc(&mut grads, *x, dx);
                    }
                }
                Op::Softmax { x } => {
                    let y = node.value.as_ref().unwrap();
                    let mut dx = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (a, b)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = a * (b - dot);
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::Gather { table, idx } => {
                    if let Op::Param(id) = self.nodes[table.0].op {
                        sink.scatter_rows(id, idx, &g);
                    } else {
                        let t = self.value(*table);
                        let mut dt = Mat::zeros(t.rows, t.cols);
                        for (r, &dst) in idx.iter().enumerate() {
                            for (o, p) in dt.row_mut(dst).iter_mut().zip(g.row(r)) {
                                *o += p;
                            }
                        }
                        self.acc(&mut grads, *table, dt);
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        dx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        if self.needs(p) {
                            let mut dp = Mat::zeros(g.rows, cols);
                            for r in 0..g.rows {
                                dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                            }
                            self.acc(&mut grads, p, dp);
                        }
                        off += cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        if self.needs(p) {
                            let dp = Mat::from_vec(rows, g.cols, g.data[off * g.cols..(off + rows) * g.cols].to_vec());
                            self.acc(&mut grads, p, dp);
                        }
                        off += rows;
                    }
                }
                Op::MeanRows(x) => {
                    let rows = self.value(*x).rows;
                    let inv = 1.0 / rows as f64;
                    let mut dx = Mat::zeros(rows, g.cols);
                    for r in 0..rows {
                        for (o, p) in dx.row_mut(r).iter_mut().zip(&g.data) {
                            *o = p * inv;
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::SumAll(x) => {
                    let xv = self.value(*x);
                    let d = Mat::from_vec(xv.rows, xv.cols, vec![g.item(); xv.len()]);
                    self.acc(&mut grads, *x, d);
                }
                Op::MulConst { x, mask } => {
                    let d = g.data.iter().zip(mask).map(|(p, m)| p * m).collect();
                    self.acc(&mut grads, *x, Mat::from_vec(g.rows, g.cols, d));
                }
                Op::L2NormRows { x, norms } => {
                    let y = node.value.as_ref().unwrap();
                    let mut dx = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (a, b)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = (b - a * dot) / norms[r];
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let lv = self.value(*logits);
                    let scale = g.item() / targets.len() as f64;
                    let mut d = Mat::from_vec(lv.rows, lv.cols, probs.clone());
                    for (r, &t) in targets.iter().enumerate() {
                        d.data[r * lv.cols + t] -= 1.0;
                    }
                    d.scale(scale);
                    self.acc(&mut grads, *logits, d);
                }
                Op::SmoothL1 { x, target } => {
                    let xv = self.value(*x);
                    let scale = g.item() / xv.len() as f64;
                    let d = xv.data.iter().zip(target).map(|(a, b)| scale * huber_grad(a - b)).collect();
                    self.acc(&mut grads, *x, Mat::from_vec(xv.rows, xv.cols, d));
                }
                Op::BceLogits { z, labels } => {
                    let zv = self.value(*z);
                    let scale = g.item();
                    let d = zv.data.iter().zip(labels).map(|(&x, y)| scale * (sigmoid(x) - y)).collect();
                    self.acc(&mut grads, *z, Mat::from_vec(zv.rows, zv.cols, d));
                }
                Op::Reshape(x) => {
                    let (r, c) = self.value(*x).shape();
                    self.acc(&mut grads, *x, Mat::from_vec(r, c, g.data));
                }
            }
        }
        InputGrads { grads: inputs }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn softmax_rows(x: &Mat, allowed: Option<&Rc<Vec<bool>>>) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let ok = |c: usize| allowed.is_none_or(|m| m[r * x.cols + c]);
        let row = x.row(r);
        let m = (0..x.cols).filter(|&c| ok(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            continue;
        }
        let o = out.row_mut(r);
        let mut s = 0.0;
        for c in 0..x.cols {
            if ok(c) {
                o[c] = (row[c] - m).exp();
                s += o[c];
            }
        }
        o.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Standalone max-subtracted softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    softmax_rows(&Mat::row_vector(x.to_vec()), None).data
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|p| (p - m).exp()).sum::<f64>().ln();
    x.iter().map(|p| p - lse).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn huber(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn huber_grad(d: f64) -> f64 {
    d.clamp(-1.0, 1.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
