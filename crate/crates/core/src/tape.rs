//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are kept
//! on the tape so that [`Tape::backward`] can walk it in reverse and
//! accumulate gradients for the nodes that were created from parameters.
//! Scalars are `1×1` matrices.

use std::fmt;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};

/// A fixed linear map `x ↦ A·x` acting on the rows of a matrix.
pub trait LinearOperator: Send + Sync + fmt::Debug {
    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64>;
    fn apply_transpose(&self, x: ArrayView2<f64>) -> Array2<f64>;
    fn name(&self) -> &'static str;
}

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    SharedMatMulNT(Arc<Array2<f64>>, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Array2<f64>),
    Linear(Arc<dyn LinearOperator>, Var),
    SoftmaxCols(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    Prelu(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    LowRank { g1: Var, g2: Var, x: Var, rank: usize },
    RowDot(Var, Var),
    NormalizeRows(Var),
    CrossEntropyDiag(Var),
    SoftplusNegMean(Var),
    MeanSquare(Var),
    SumSquares(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by parameter id.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: ParamId) -> Option<Array2<f64>> {
        self.grads.get_mut(id).and_then(Option::take)
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            other => inputs(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId, value: Array2<f64>) -> Var {
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNT(a, b))
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).t().dot(self.value(b));
        self.push(v, Op::MatMulTN(a, b))
    }

    /// `x · wᵀ` for a large constant `x` shared across tapes.
    pub fn shared_matmul_nt(&mut self, x: Arc<Array2<f64>>, w: Var) -> Var {
        let v = x.dot(&self.value(w).t());
        self.push(v, Op::SharedMatMulNT(x, w))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1×d` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    /// Element-wise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Array2<f64>) -> Var {
        let v = self.value(a) * &mask;
        self.push(v, Op::MulConst(a, mask))
    }

    pub fn linear(&mut self, op: Arc<dyn LinearOperator>, x: Var) -> Var {
        let v = op.apply(self.value(x).view());
        self.push(v, Op::Linear(op, x))
    }

    /// Softmax down each column (columns sum to one).
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for col in v.columns_mut() {
            softmax_lane(col);
        }
        self.push(v, Op::SoftmaxCols(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for row in v.rows_mut() {
            softmax_lane(row);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)` without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let v = layer_norm(self.value(a), eps);
        self.push(v, Op::LayerNormRows(a, eps))
    }

    /// PReLU with a learnable `1×1` slope.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        let a = self.scalar(slope);
        let v = self.value(x).mapv(|e| if e > 0.0 { e } else { a * e });
        self.push(v, Op::Prelu(x, slope))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    /// Per-row low-rank transfer: with `W1 = reshape(g1[r], d×k)` and
    /// `W2 = reshape(g2[r], k×d)` (row-major), row `r` of the output is
    /// `W1 · W2 · x[r]`.
    pub fn low_rank(&mut self, g1: Var, g2: Var, x: Var, rank: usize) -> Var {
        let (n, d) = self.shape(x);
        let a = self.value(g1).as_standard_layout();
        let b = self.value(g2).as_standard_layout();
        let xv = self.value(x).as_standard_layout();
        let mut out = Array2::zeros((n, d));
        for (r, mut orow) in out.rows_mut().into_iter().enumerate() {
            let t = low_rank_inner(b.row(r).as_slice().expect("contiguous"), xv.row(r).as_slice().expect("contiguous"), rank, d);
            let w1 = a.row(r);
            let w1 = w1.as_slice().expect("contiguous");
            for (o, wi) in orow.iter_mut().zip(w1.chunks_exact(rank)) {
                *o = wi.iter().zip(&t).map(|(w, tc)| w * tc).sum();
            }
        }
        self.push(out, Op::LowRank { g1, g2, x, rank })
    }

    /// `n×1` column of row-wise dot products.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let v = (self.value(a) * self.value(b)).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowDot(a, b))
    }

    /// Scales rows to unit length; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        }
        self.push(v, Op::NormalizeRows(a))
    }

    /// Mean over rows of `-log softmax(row)[r]` for square logits.
    pub fn cross_entropy_diag(&mut self, logits: Var) -> Var {
        let l = self.value(logits);
        let n = l.nrows();
        let mut total = 0.0;
        for (r, row) in l.rows().into_iter().enumerate() {
            total += log_sum_exp(row.iter().copied()) - row[r];
        }
        self.push(Array2::from_elem((1, 1), total / n as f64), Op::CrossEntropyDiag(logits))
    }

    /// `mean(softplus(-x))`, i.e. the mean of `-ln σ(x)`.
    pub fn softplus_neg_mean(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let v = xs.iter().map(|&e| softplus(-e)).sum::<f64>() / xs.len() as f64;
        self.push(Array2::from_elem((1, 1), v), Op::SoftplusNegMean(x))
    }

    pub fn mean_square(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let v = xs.iter().map(|e| e * e).sum::<f64>() / xs.len() as f64;
        self.push(Array2::from_elem((1, 1), v), Op::MeanSquare(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|e| e * e).sum::<f64>();
        self.push(Array2::from_elem((1, 1), v), Op::SumSquares(x))
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.nodes[root.0].value.raw_dim()));
        let mut out = Gradients::default();
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Param(id) = node.op {
                if out.grads.len() <= id {
                    out.grads.resize_with(id + 1, || None);
                }
                accumulate(&mut out.grads[id], g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        out
    }

    fn backprop_node(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut send = |v: Var, delta: Array2<f64>| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], delta);
            }
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    send(*a, g.dot(&val(*b).t()));
                }
                if wants(*b) {
                    send(*b, val(*a).t().dot(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if wants(*a) {
                    send(*a, g.dot(val(*b)));
                }
                if wants(*b) {
                    send(*b, g.t().dot(val(*a)));
                }
            }
            Op::MatMulTN(a, b) => {
                if wants(*a) {
                    send(*a, val(*b).dot(&g.t()));
                }
                if wants(*b) {
                    send(*b, val(*a).dot(g));
                }
            }
            Op::SharedMatMulNT(x, w) => send(*w, g.t().dot(x.as_ref())),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                send(*a, g.clone());
                send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, -g);
            }
            Op::Scale(a, k) => send(*a, g * *k),
            Op::MulConst(a, m) => send(*a, g * m),
            Op::Linear(op, x) => send(*x, op.apply_transpose(g.view())),
            Op::SoftmaxCols(a) => {
                let y = &node.value;
                let dot = (g * y).sum_axis(Axis(0));
                send(*a, y * &(g - &dot.insert_axis(Axis(0))));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let dot = (g * y).sum_axis(Axis(1));
                send(*a, y * &(g - &dot.insert_axis(Axis(1))));
            }
            Op::LayerNormRows(a, eps) => {
                let x = val(*a);
                let d = x.ncols() as f64;
                let mut gx = Array2::zeros(x.raw_dim());
                for ((xr, gr), mut out) in x.rows().into_iter().zip(g.rows()).zip(gx.rows_mut()) {
                    let mean = xr.sum() / d;
                    let var = xr.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat = xr.mapv(|e| (e - mean) * inv);
                    let g_mean = gr.sum() / d;
                    let gx_mean = (&gr * &xhat).sum() / d;
                    out.assign(&((&gr - g_mean - &(&xhat * gx_mean)) * inv));
                }
                send(*a, gx);
            }
            Op::Prelu(x, slope) => {
                let xv = val(*x);
                let a = self.nodes[slope.0].value[[0, 0]];
                if wants(*x) {
                    let mut gx = g.clone();
                    ndarray::Zip::from(&mut gx).and(xv).for_each(|gi, &xi| {
                        if xi <= 0.0 {
                            *gi *= a;
                        }
                    });
                    send(*x, gx);
                }
                if wants(*slope) {
                    let ga: f64 = ndarray::Zip::from(g)
                        .and(xv)
                        .fold(0.0, |acc, &gi, &xi| if xi <= 0.0 { acc + gi * xi } else { acc });
                    send(*slope, Array2::from_elem((1, 1), ga));
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    send(*p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let mut ga = Array2::zeros(val(*a).raw_dim());
                let w = g.ncols();
                ga.slice_mut(s![.., *start..*start + w]).assign(g);
                send(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = val(*p).nrows();
                    send(*p, g.slice(s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                let mut ga = Array2::zeros(val(*a).raw_dim());
                let h = g.nrows();
                ga.slice_mut(s![*start..*start + h, ..]).assign(g);
                send(*a, ga);
            }
            Op::GatherRows(a, idx) => {
                let mut ga = Array2::zeros(val(*a).raw_dim());
                for (k, &r) in idx.iter().enumerate() {
                    let mut dst = ga.row_mut(r);
                    dst += &g.row(k);
                }
                send(*a, ga);
            }
            Op::LowRank { g1, g2, x, rank } => {
                let w1s = val(*g1).as_standard_layout();
                let w2s = val(*g2).as_standard_layout();
                let xs = val(*x).as_standard_layout();
                let (n, d) = xs.dim();
                let k = *rank;
                let mut gw1 = Array2::zeros(w1s.raw_dim());
                let mut gw2 = Array2::zeros(w2s.raw_dim());
                let mut gxs = Array2::zeros(xs.raw_dim());
                let gs = g.as_standard_layout();
                for r in 0..n {
                    let w1 = w1s.row(r);
                    let w1 = w1.as_slice().expect("contiguous");
                    let w2 = w2s.row(r);
                    let w2 = w2.as_slice().expect("contiguous");
                    let xr = xs.row(r);
                    let xr = xr.as_slice().expect("contiguous");
                    let gr = gs.row(r);
                    let gr = gr.as_slice().expect("contiguous");
                    let t = low_rank_inner(w2, xr, k, d);
                    let mut gt = vec![0.0; k];
                    let mut gw1_row = gw1.row_mut(r);
                    let gw1_row = gw1_row.as_slice_mut().expect("contiguous");
                    for i in 0..d {
                        for c in 0..k {
                            gw1_row[i * k + c] = gr[i] * t[c];
                            gt[c] += w1[i * k + c] * gr[i];
                        }
                    }
                    let mut gw2_row = gw2.row_mut(r);
                    let gw2_row = gw2_row.as_slice_mut().expect("contiguous");
                    let mut gx_row = gxs.row_mut(r);
                    let gx_row = gx_row.as_slice_mut().expect("contiguous");
                    for c in 0..k {
                        for j in 0..d {
                            gw2_row[c * d + j] = gt[c] * xr[j];
                            gx_row[j] += w2[c * d + j] * gt[c];
                        }
                    }
                }
                send(*g1, gw1);
                send(*g2, gw2);
                send(*x, gxs);
            }
            Op::RowDot(a, b) => {
                send(*a, val(*b) * g);
                send(*b, val(*a) * g);
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut gx = Array2::zeros(x.raw_dim());
                for ((xr, (yr, gr)), mut out) in x
                    .rows()
                    .into_iter()
                    .zip(y.rows().into_iter().zip(g.rows()))
                    .zip(gx.rows_mut())
                {
                    let norm = xr.dot(&xr).sqrt();
                    if norm > 0.0 {
                        let proj = yr.dot(&gr);
                        out.assign(&((&gr - &(&yr * proj)) / norm));
                    }
                }
                send(*a, gx);
            }
            Op::CrossEntropyDiag(logits) => {
                let l = val(*logits);
                let n = l.nrows() as f64;
                let scale = g[[0, 0]] / n;
                let mut gl = l.clone();
                for (r, mut row) in gl.rows_mut().into_iter().enumerate() {
                    softmax_lane(row.view_mut());
                    row[r] -= 1.0;
                    row *= scale;
                }
                send(*logits, gl);
            }
            Op::SoftplusNegMean(x) => {
                let xs = val(*x);
                let scale = g[[0, 0]] / xs.len() as f64;
                send(*x, xs.mapv(|e| -sigmoid(-e) * scale));
            }
            Op::MeanSquare(x) => {
                let xs = val(*x);
                let scale = 2.0 * g[[0, 0]] / xs.len() as f64;
                send(*x, xs * scale);
            }
            Op::SumSquares(x) => {
                let scale = 2.0 * g[[0, 0]];
                send(*x, val(*x) * scale);
            }
        }
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Constant | Op::Param(_) => vec![],
        Op::MatMul(a, b)
        | Op::MatMulNT(a, b)
        | Op::MatMulTN(a, b)
        | Op::Add(a, b)
        | Op::AddRow(a, b)
        | Op::Sub(a, b)
        | Op::Prelu(a, b)
        | Op::RowDot(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::MulConst(a, _)
        | Op::Linear(_, a)
        | Op::SharedMatMulNT(_, a)
        | Op::SoftmaxCols(a)
        | Op::SoftmaxRows(a)
        | Op::LayerNormRows(a, _)
        | Op::SliceCols(a, _)
        | Op::SliceRows(a, _)
        | Op::GatherRows(a, _)
        | Op::NormalizeRows(a)
        | Op::CrossEntropyDiag(a)
        | Op::SoftplusNegMean(a)
        | Op::MeanSquare(a)
        | Op::SumSquares(a) => vec![*a],
        Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        Op::LowRank { g1, g2, x, .. } => vec![*g1, *g2, *x],
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta),
    }
}

/// `W2 · x` where `W2` is the row-major `k×d` view of `w2`.
fn low_rank_inner(w2: &[f64], x: &[f64], k: usize, d: usize) -> Vec<f64> {
    (0..k)
        .map(|c| w2[c * d..(c + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn softmax_lane(mut lane: ndarray::ArrayViewMut1<f64>) {
    let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    lane.mapv_inplace(|e| {
        let v = (e - max).exp();
        total += v;
        v
    });
    lane /= total;
}

pub(crate) fn layer_norm(x: &Array2<f64>, eps: f64) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|e| (e - mean) * inv);
    }
    out
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `f` with respect to each input.
    fn check(inputs: Vec<Array2<f64>>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |vals: &[Array2<f64>]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = vals.iter().enumerate().map(|(i, v)| t.param(i, v.clone())).collect();
            let out = f(&mut t, &vars);
            (t, out)
        };
        let (tape, out) = eval(&inputs);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (pi, inp) in inputs.iter().enumerate() {
            let g = grads.get(pi).cloned().unwrap_or_else(|| Array2::zeros(inp.raw_dim()));
            for idx in 0..inp.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[pi].as_slice_mut().unwrap()[idx] += h;
                minus[pi].as_slice_mut().unwrap()[idx] -= h;
                let (tp, op) = eval(&plus);
                let (tm, om) = eval(&minus);
                let num = (tp.scalar(op) - tm.scalar(om)) / (2.0 * h);
                let ana = g.as_slice().unwrap()[idx];
                assert!(
                    (num - ana).abs() <= 1e-6 * (1.0 + num.abs()),
                    "input {pi} entry {idx}: analytic {ana} numeric {num}"
                );
            }
        }
    }

    /// Reduces a matrix to a scalar with fixed random weights.
    fn probe(t: &mut Tape, x: Var, seed: u64) -> Var {
        let (r, c) = t.shape(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = t.constant(random(&mut rng, r, c));
        let d = t.row_dot(x, w);
        let ones = t.constant(Array2::ones((1, r)));
        t.matmul(ones, d)
    }

    #[test]
    fn matmul_family_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2)], |t, v| {
            let m = t.matmul(v[0], v[1]);
            probe(t, m, 9)
        });
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 5, 4)], |t, v| {
            let m = t.matmul_nt(v[0], v[1]);
            probe(t, m, 9)
        });
        check(vec![random(&mut rng, 4, 3), random(&mut rng, 4, 2)], |t, v| {
            let m = t.matmul_tn(v[0], v[1]);
            probe(t, m, 9)
        });
        let shared = Arc::new(random(&mut rng, 5, 3));
        check(vec![random(&mut rng, 2, 3)], move |t, v| {
            let m = t.shared_matmul_nt(shared.clone(), v[0]);
            probe(t, m, 9)
        });
    }

    #[test]
    fn softmax_and_layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(vec![random(&mut rng, 4, 3)], |t, v| {
            let m = t.softmax_cols(v[0]);
            probe(t, m, 3)
        });
        check(vec![random(&mut rng, 4, 3)], |t, v| {
            let m = t.softmax_rows(v[0]);
            probe(t, m, 3)
        });
        check(vec![random(&mut rng, 3, 5)], |t, v| {
            let m = t.layer_norm_rows(v[0], 1e-6);
            probe(t, m, 4)
        });
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(vec![random(&mut rng, 3, 4), Array2::from_elem((1, 1), 0.25)], |t, v| {
            let m = t.prelu(v[0], v[1]);
            probe(t, m, 5)
        });
        check(vec![random(&mut rng, 3, 2), random(&mut rng, 3, 3), random(&mut rng, 1, 5)], |t, v| {
            let c = t.concat_cols(&[v[0], v[1]]);
            let c = t.add_row(c, v[2]);
            let s = t.slice_cols(c, 1, 4);
            let g = t.gather_rows(s, &[2, 0, 2]);
            let r = t.concat_rows(&[g, s]);
            let r = t.slice_rows(r, 1, 5);
            probe(t, r, 6)
        });
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 3, 4)], |t, v| {
            let n = t.normalize_rows(v[0]);
            let d = t.sub(n, v[1]);
            let d = t.scale(d, 1.7);
            let sq = t.mean_square(d);
            let ss = t.sum_squares(v[1]);
            t.add(sq, ss)
        });
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(vec![random(&mut rng, 4, 4)], |t, v| t.cross_entropy_diag(v[0]));
        check(vec![random(&mut rng, 5, 1)], |t, v| t.softplus_neg_mean(v[0]));
    }

    #[test]
    fn low_rank_gradients_and_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d, k) = (3, 4, 2);
        let g1 = random(&mut rng, n, d * k);
        let g2 = random(&mut rng, n, k * d);
        let x = random(&mut rng, n, d);
        let mut t = Tape::new();
        let (a, b, c) = (t.constant(g1.clone()), t.constant(g2.clone()), t.constant(x.clone()));
        let out = t.low_rank(a, b, c, k);
        for r in 0..n {
            let w1 = g1.row(r).to_owned().into_shape_with_order((d, k)).unwrap();
            let w2 = g2.row(r).to_owned().into_shape_with_order((k, d)).unwrap();
            let expect = w1.dot(&w2).dot(&x.row(r));
            for i in 0..d {
                assert!((t.value(out)[[r, i]] - expect[i]).abs() < 1e-12);
            }
        }
        check(vec![g1, g2, x], |t, v| {
            let m = t.low_rank(v[0], v[1], v[2], k);
            probe(t, m, 7)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Array2::ones((2, 2)));
        let p = t.param(0, Array2::ones((2, 2)));
        let m = t.matmul(c, p);
        let s = t.sum_squares(m);
        let g = t.backward(s);
        assert!(g.get(0).is_some());
        assert!(g.get(1).is_none());
    }

    #[test]
    fn stable_scalar_helpers() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0).is_finite());
    }
}
