//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records one forward computation (one training batch). Parameter
//! leaves borrow their values from a [`ParamStore`]; everything else read from
//! outside the tape (memory rows, edge features, distillation targets) enters
//! as a constant, so gradients never flow past the tape that created them.
//! Dropping the tape at the end of a batch is what truncates gradient history.

use rand::Rng;

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    ParamRows(ParamId, Vec<usize>),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Cos(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    RowNorm { x: Var, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, offsets: Vec<usize>, heads: usize, weights: Vec<f64> },
    SumAll(Var),
    BceLogits(Var, Vec<f64>),
    SqDiffSum(Var, Mat),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        match self.nodes[v.0].op {
            Op::Param(id) => self.store.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Softmax weights saved by an attention node, laid out `[head][key_row]`.
    pub fn attention_weights(&self, v: Var) -> Option<(&[f64], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, heads, .. } => Some((weights, *heads)),
            _ => None,
        }
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Mat::zeros(0, 0), Op::Param(id))
    }

    /// Rows of a parameter table, with row-sparse gradient accumulation.
    pub fn param_rows(&mut self, id: ParamId, rows: Vec<usize>) -> Var {
        let value = self.store.get(id).gather_rows(&rows);
        self.push(value, Op::ParamRows(id, rows))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// `a + row`, broadcasting a `1×c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = broadcast_row(self.value(a), self.value(row), |x, y| x + y);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = broadcast_row(self.value(a), self.value(row), |x, y| x * y);
        self.push(value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::cos);
        self.push(value, Op::Cos(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Mat::concat_cols(&mats);
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Mat::concat_rows(&mats);
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let value = self.value(a).slice_cols(start, width);
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn gather(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let value = self.value(a).gather_rows(&rows);
        self.push(value, Op::Gather(a, rows))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`.
    pub fn row_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::RowNorm { x, inv_std })
    }

    /// Scaled dot-product attention of one query row per segment against a
    /// variable number of key/value rows.
    ///
    /// `offsets` has one entry per query plus a final end marker; query `b`
    /// attends over key rows `offsets[b]..offsets[b + 1]`, which must be
    /// non-empty. Query/key width and value width must be divisible by `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, offsets: Vec<usize>, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let b = qv.rows();
        assert_eq!(offsets.len(), b + 1, "offsets must have one entry per query plus end");
        assert_eq!(*offsets.last().unwrap(), kv.rows(), "offsets must cover all key rows");
        assert_eq!(kv.rows(), vv.rows());
        assert_eq!(qv.cols(), kv.cols());
        assert!(heads > 0 && qv.cols() % heads == 0 && vv.cols() % heads == 0, "heads must divide widths");
        let dk = qv.cols() / heads;
        let dv = vv.cols() / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let rtotal = kv.rows();
        let mut weights = vec![0.0; heads * rtotal];
        let mut out = Mat::zeros(b, heads * dv);
        for bi in 0..b {
            let (lo, hi) = (offsets[bi], offsets[bi + 1]);
            assert!(hi > lo, "attention segment {bi} is empty");
            let qrow = qv.row(bi);
            for h in 0..heads {
                let qh = &qrow[h * dk..(h + 1) * dk];
                let w = &mut weights[h * rtotal + lo..h * rtotal + hi];
                let mut max = f64::NEG_INFINITY;
                for (r, wr) in (lo..hi).zip(w.iter_mut()) {
                    let kh = &kv.row(r)[h * dk..(h + 1) * dk];
                    *wr = scale * dot(qh, kh);
                    max = max.max(*wr);
                }
                let mut z = 0.0;
                for wr in w.iter_mut() {
                    *wr = (*wr - max).exp();
                    z += *wr;
                }
                let orow = &mut out.row_mut(bi)[h * dv..(h + 1) * dv];
                for (r, wr) in (lo..hi).zip(w.iter_mut()) {
                    *wr /= z;
                    let vh = &vv.row(r)[h * dv..(h + 1) * dv];
                    for (o, x) in orow.iter_mut().zip(vh) {
                        *o += *wr * x;
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, offsets, heads, weights })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    /// Summed binary cross-entropy of logits `x` (`n×1`) against 0/1 targets.
    pub fn bce_logits_sum(&mut self, x: Var, targets: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.data().len(), targets.len());
        let loss: f64 = xv.data().iter().zip(&targets).map(|(&x, &y)| softplus(x) - x * y).sum();
        self.push(Mat::scalar(loss), Op::BceLogits(x, targets))
    }

    /// `sum((a - target)^2)` with `target` held constant.
    pub fn sq_diff_sum(&mut self, a: Var, target: Mat) -> Var {
        let loss = self.value(a).zip_map(&target, |x, y| (x - y) * (x - y)).sum();
        self.push(Mat::scalar(loss), Op::SqDiffSum(a, target))
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let (r, c) = self.shape(a);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..r * c).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = self.constant(Mat::from_vec(r, c, mask));
        self.mul(a, m)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward() needs a scalar");
        self.backward_from(loss, Mat::scalar(1.0))
    }

    /// Back-propagates `seed` (same shape as `out`) and returns parameter gradients.
    pub fn backward_from(&self, out: Var, seed: Mat) -> Grads {
        let mut grads = Grads::zeros_like(self.store);
        let mut adj: Vec<Option<Mat>> = vec![None; out.0 + 1];
        adj[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::ParamRows(id, rows) => grads.accumulate_rows(*id, self.store.get(*id).shape(), rows, &g),
                Op::MatMul(a, b) => {
                    let ga = Mat::matmul_t(&g, false, self.value(*b), true);
                    let gb = Mat::matmul_t(self.value(*a), true, &g, false);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, g.map(|x| -x));
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::AddRow(a, row) => {
                    acc(&mut adj, *row, g.sum_rows());
                    acc(&mut adj, *a, g);
                }
                Op::MulRow(a, row) => {
                    let rv = self.value(*row);
                    let ga = broadcast_row(&g, rv, |x, y| x * y);
                    let gr = g.zip_map(self.value(*a), |x, y| x * y).sum_rows();
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *row, gr);
                }
                Op::Scale(a, s) => acc(&mut adj, *a, g.map(|x| x * s)),
                Op::Sigmoid(a) => acc(&mut adj, *a, g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y))),
                Op::Tanh(a) => acc(&mut adj, *a, g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))),
                Op::Relu(a) => acc(&mut adj, *a, g.zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })),
                Op::Cos(a) => acc(&mut adj, *a, g.zip_map(self.value(*a), |gi, x| -gi * x.sin())),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(&mut adj, p, g.slice_cols(start, w));
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut start = 0;
                    for &p in parts {
                        let r = self.shape(p).0;
                        let part = Mat::from_vec(r, cols, g.data()[start * cols..(start + r) * cols].to_vec());
                        acc(&mut adj, p, part);
                        start += r;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Mat::zeros(r, c);
                    let w = g.cols();
                    for row in 0..r {
                        ga.row_mut(row)[*start..start + w].copy_from_slice(g.row(row));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Gather(a, rows) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Mat::zeros(r, c);
                    for (k, &src) in rows.iter().enumerate() {
                        for (x, y) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                            *x += y;
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::RowNorm { x, inv_std } => {
                    let y = &node.value;
                    let (rows, cols) = y.shape();
                    let mut gx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let gy = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gy.iter().sum::<f64>() / cols as f64;
                        let mean_gy = dot(gy, yr) / cols as f64;
                        for ((o, &gi), &yi) in gx.row_mut(r).iter_mut().zip(gy).zip(yr) {
                            *o = inv_std[r] * (gi - mean_g - yi * mean_gy);
                        }
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::Attention { q, k, v, offsets, heads, weights } => {
                    let (gq, gk, gv) = self.attention_backward(&g, *q, *k, *v, offsets, *heads, weights);
                    acc(&mut adj, *q, gq);
                    acc(&mut adj, *k, gk);
                    acc(&mut adj, *v, gv);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut adj, *a, Mat::filled(r, c, g.item()));
                }
                Op::BceLogits(x, targets) => {
                    let s = g.item();
                    let xv = self.value(*x);
                    let data = xv.data().iter().zip(targets).map(|(&x, &y)| s * (sigmoid(x) - y)).collect();
                    acc(&mut adj, *x, Mat::from_vec(xv.rows(), xv.cols(), data));
                }
                Op::SqDiffSum(a, target) => {
                    let s = g.item();
                    acc(&mut adj, *a, self.value(*a).zip_map(target, |x, y| 2.0 * s * (x - y)));
                }
            }
        }
        grads
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Mat,
        q: Var,
        k: Var,
        v: Var,
        offsets: &[usize],
        heads: usize,
        weights: &[f64],
    ) -> (Mat, Mat, Mat) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dk = qv.cols() / heads;
        let dv = vv.cols() / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let rtotal = kv.rows();
        let mut gq = Mat::zeros(qv.rows(), qv.cols());
        let mut gk = Mat::zeros(kv.rows(), kv.cols());
        let mut gv = Mat::zeros(vv.rows(), vv.cols());
        let mut da = Vec::new();
        for bi in 0..qv.rows() {
            let (lo, hi) = (offsets[bi], offsets[bi + 1]);
            for h in 0..heads {
                let go = &g.row(bi)[h * dv..(h + 1) * dv];
                let w = &weights[h * rtotal + lo..h * rtotal + hi];
                da.clear();
                for (r, &wr) in (lo..hi).zip(w) {
                    let vh = &vv.row(r)[h * dv..(h + 1) * dv];
                    da.push(dot(go, vh));
                    for (x, y) in gv.row_mut(r)[h * dv..(h + 1) * dv].iter_mut().zip(go) {
                        *x += wr * y;
                    }
                }
                let wda: f64 = w.iter().zip(&da).map(|(a, b)| a * b).sum();
                let qh = &qv.row(bi)[h * dk..(h + 1) * dk];
                for (j, r) in (lo..hi).enumerate() {
                    let ds = w[j] * (da[j] - wda) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kh = &kv.row(r)[h * dk..(h + 1) * dk];
                    for (x, y) in gq.row_mut(bi)[h * dk..(h + 1) * dk].iter_mut().zip(kh) {
                        *x += ds * y;
                    }
                    for (x, y) in gk.row_mut(r)[h * dk..(h + 1) * dk].iter_mut().zip(qh) {
                        *x += ds * y;
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

fn acc(adj: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_row(a: &Mat, row: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    assert_eq!(row.rows(), 1, "broadcast operand must be a single row");
    assert_eq!(a.cols(), row.cols(), "broadcast width mismatch");
    let mut out = a.clone();
    for r in 0..out.rows() {
        for (x, &y) in out.row_mut(r).iter_mut().zip(row.data()) {
            *x = f(*x, y);
        }
    }
    out
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
