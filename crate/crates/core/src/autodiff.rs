//! Reverse-mode autodiff over dense `f64` matrices.
//!
//! A [`Graph`] is a define-by-run tape: each op computes its value eagerly
//! when pushed and records enough to run the backward pass. Ops only
//! reference earlier nodes, so one reverse sweep over the node list is a
//! valid topological traversal.
//!
//! The op set is exactly what the correspondence pipeline needs: matrix
//! products, elementwise arithmetic, row gathers, grouped max pooling,
//! row softmax/normalization, and a few fused losses (smooth L1, Chamfer,
//! neighborhood regularizer, indexed cross-entropy). Gradients are computed
//! for every ancestor of the loss whose inputs require them; everything else
//! is skipped.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::fx;
use crate::tensor::Matrix;

/// Counts rows whose norm hit the `eps` clamp in [`Graph::row_normalize`].
/// Signals near-zero feature rows without ever producing NaN.
static NORM_CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

pub fn norm_clamp_count() -> u64 {
    NORM_CLAMP_EVENTS.load(Ordering::Relaxed)
}

pub fn reset_norm_clamp_count() {
    NORM_CLAMP_EVENTS.store(0, Ordering::Relaxed);
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    /// `ln(max(x, eps))`; zero derivative inside the clamp.
    LnClamped(f64),
    /// `x^p` for constant `p`.
    PowConst(f64),
    OneMinus,
}

impl Unary {
    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => 1.0 / (1.0 + fx::exp(-x)),
            Unary::LnClamped(eps) => fx::ln(x.max(eps)),
            Unary::PowConst(p) => fx::powf(x, p),
            Unary::OneMinus => 1.0 - x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::LnClamped(eps) => {
                if x > eps {
                    1.0 / x
                } else {
                    0.0
                }
            }
            Unary::PowConst(p) => p * fx::powf(x, p - 1.0),
            Unary::OneMinus => -1.0,
        }
    }
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a @ b^T`.
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Broadcast-add a 1xC bias row to every row of `a`.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Map(NodeId, Unary),
    /// Output row `r` is input row `idx[r]`.
    GatherRows(NodeId, Vec<usize>),
    /// Output entry `(r, c)` is input entry `(rows[r*cols+c], cols_idx[r*cols+c])`.
    GatherEntries {
        a: NodeId,
        rows: Vec<usize>,
        cols_idx: Vec<usize>,
    },
    ConcatCols(NodeId, NodeId),
    /// Max over each consecutive group of `k` rows; `argmax` holds the
    /// winning absolute input row per (output row, column).
    GroupMaxPool { a: NodeId, argmax: Vec<usize> },
    /// Column-wise max over all rows -> 1xC; `argmax` holds winning rows.
    ColMax { a: NodeId, argmax: Vec<usize> },
    /// Column-wise mean over all rows -> 1xC.
    ColMean(NodeId),
    SoftmaxRows(NodeId),
    /// Rows scaled to unit norm, denominator clamped at `eps`.
    RowNormalize { a: NodeId, eps: f64 },
    Transpose(NodeId),
    /// Row `i` of the output is `sum_l w[i,l] * v[i*k+l, :]`.
    WeightedGroupSum { w: NodeId, v: NodeId, k: usize },
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    /// Per-column standardization over rows with learnable 1xC gain/bias.
    ColNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    /// Mean smooth-L1 over entries -> 1x1.
    SmoothL1 { a: NodeId, b: NodeId, beta: f64 },
    /// Symmetric squared-mean Chamfer distance over Nx3 clouds -> 1x1.
    Chamfer {
        a: NodeId,
        b: NodeId,
        nn_ab: Vec<usize>,
        nn_ba: Vec<usize>,
    },
    /// `sum_t w_t * ||y[i_t] - y[l_t]||^2` -> 1x1.
    PairwiseShrink {
        y: NodeId,
        pairs: Vec<(usize, usize)>,
        weights: Vec<f64>,
    },
    /// `-ln(max(probs[0, index], eps))` -> 1x1.
    CrossEntropyIndex {
        probs: NodeId,
        index: usize,
        eps: f64,
    },
    /// Identity forward, gradient multiplied by `-weight` (gradient reversal).
    Grl(NodeId, f64),
    SumEntries(NodeId),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf: no gradient is ever accumulated for it.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (parameter or probed input).
    pub fn param(&mut self, value: &Matrix) -> NodeId {
        self.push(value.clone(), Op::Leaf, true)
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), needs)
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_bt(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMulBt(a, b), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "add shape mismatch");
        let mut v = va.clone();
        v.axpy(1.0, vb);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "sub shape mismatch");
        let mut v = va.clone();
        v.axpy(-1.0, vb);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "mul shape mismatch");
        let v = Matrix::from_fn(va.rows(), va.cols(), |r, c| va.at(r, c) * vb.at(r, c));
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), needs)
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(bias));
        assert_eq!(vb.rows(), 1, "bias must be a single row");
        assert_eq!(va.cols(), vb.cols(), "bias width mismatch");
        let v = Matrix::from_fn(va.rows(), va.cols(), |r, c| va.at(r, c) + vb.at(0, c));
        let needs = self.needs(a) || self.needs(bias);
        self.push(v, Op::AddRow(a, bias), needs)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale_in_place(factor);
        let needs = self.needs(a);
        self.push(v, Op::Scale(a, factor), needs)
    }

    fn map(&mut self, a: NodeId, u: Unary) -> NodeId {
        let v = self.value(a).map(|x| u.eval(x));
        let needs = self.needs(a);
        self.push(v, Op::Map(a, u), needs)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.map(a, Unary::LeakyRelu(slope))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, Unary::Sigmoid)
    }

    pub fn ln_clamped(&mut self, a: NodeId, eps: f64) -> NodeId {
        self.map(a, Unary::LnClamped(eps))
    }

    pub fn pow_const(&mut self, a: NodeId, p: f64) -> NodeId {
        self.map(a, Unary::PowConst(p))
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        self.map(a, Unary::OneMinus)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let va = self.value(a);
        let mut v = Matrix::zeros(idx.len(), va.cols());
        for (r, &src) in idx.iter().enumerate() {
            v.row_mut(r).copy_from_slice(va.row(src));
        }
        let needs = self.needs(a);
        self.push(v, Op::GatherRows(a, idx), needs)
    }

    /// Entry gather: output is `out_rows x out_cols` with
    /// `out[r, c] = a[rows[r*out_cols+c], cols_idx[r*out_cols+c]]`.
    pub fn gather_entries(
        &mut self,
        a: NodeId,
        out_rows: usize,
        out_cols: usize,
        rows: Vec<usize>,
        cols_idx: Vec<usize>,
    ) -> NodeId {
        assert_eq!(rows.len(), out_rows * out_cols);
        assert_eq!(cols_idx.len(), rows.len());
        let va = self.value(a);
        let v = Matrix::from_fn(out_rows, out_cols, |r, c| {
            va.at(rows[r * out_cols + c], cols_idx[r * out_cols + c])
        });
        let needs = self.needs(a);
        self.push(v, Op::GatherEntries { a, rows, cols_idx }, needs)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows(), "concat_cols row mismatch");
        let (ca, cb) = (va.cols(), vb.cols());
        let v = Matrix::from_fn(va.rows(), ca + cb, |r, c| {
            if c < ca {
                va.at(r, c)
            } else {
                vb.at(r, c - ca)
            }
        });
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatCols(a, b), needs)
    }

    /// Max over each consecutive group of `k` rows: (N*k)xC -> NxC.
    /// Ties break toward the first row of the group.
    pub fn group_max_pool(&mut self, a: NodeId, k: usize) -> NodeId {
        let va = self.value(a);
        assert!(k > 0 && va.rows() % k == 0, "group size must divide rows");
        let n = va.rows() / k;
        let c = va.cols();
        let mut v = Matrix::zeros(n, c);
        let mut argmax = vec![0usize; n * c];
        for i in 0..n {
            for col in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_row = i * k;
                for l in 0..k {
                    let row = i * k + l;
                    let x = va.at(row, col);
                    if x > best {
                        best = x;
                        best_row = row;
                    }
                }
                *v.at_mut(i, col) = best;
                argmax[i * c + col] = best_row;
            }
        }
        let needs = self.needs(a);
        self.push(v, Op::GroupMaxPool { a, argmax }, needs)
    }

    /// Column-wise max over all rows: NxC -> 1xC. Ties break toward row 0.
    pub fn col_max(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let c = va.cols();
        let mut v = Matrix::zeros(1, c);
        let mut argmax = vec![0usize; c];
        for col in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut best_row = 0;
            for row in 0..va.rows() {
                let x = va.at(row, col);
                if x > best {
                    best = x;
                    best_row = row;
                }
            }
            *v.at_mut(0, col) = best;
            argmax[col] = best_row;
        }
        let needs = self.needs(a);
        self.push(v, Op::ColMax { a, argmax }, needs)
    }

    /// Column-wise mean over all rows: NxC -> 1xC.
    pub fn col_mean(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let n = va.rows() as f64;
        let mut v = Matrix::zeros(1, va.cols());
        for row in 0..va.rows() {
            for col in 0..va.cols() {
                *v.at_mut(0, col) += va.at(row, col) / n;
            }
        }
        let needs = self.needs(a);
        self.push(v, Op::ColMean(a), needs)
    }

    /// Row-wise softmax with max-shift for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = Matrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let row = va.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (c, &x) in row.iter().enumerate() {
                let e = fx::exp(x - m);
                *v.at_mut(r, c) = e;
                denom += e;
            }
            for c in 0..va.cols() {
                *v.at_mut(r, c) /= denom;
            }
        }
        let needs = self.needs(a);
        self.push(v, Op::SoftmaxRows(a), needs)
    }

    /// Scales each row to unit Euclidean norm; rows with norm below `eps`
    /// are divided by `eps` instead and counted in [`norm_clamp_count`].
    pub fn row_normalize(&mut self, a: NodeId, eps: f64) -> NodeId {
        let va = self.value(a);
        let mut v = Matrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let norm = fx::sqrt(va.row(r).iter().map(|x| x * x).sum());
            let denom = if norm > eps {
                norm
            } else {
                NORM_CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
                eps
            };
            for c in 0..va.cols() {
                *v.at_mut(r, c) = va.at(r, c) / denom;
            }
        }
        let needs = self.needs(a);
        self.push(v, Op::RowNormalize { a, eps }, needs)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let needs = self.needs(a);
        self.push(v, Op::Transpose(a), needs)
    }

    /// Row `i` of the output is `sum_l w[i,l] * v[i*k+l, :]`.
    pub fn weighted_group_sum(&mut self, w: NodeId, v: NodeId, k: usize) -> NodeId {
        let (vw, vv) = (self.value(w), self.value(v));
        assert_eq!(vw.cols(), k, "weights must be Nxk");
        assert_eq!(vv.rows(), vw.rows() * k, "values must be (N*k)xC");
        let c = vv.cols();
        let mut out = Matrix::zeros(vw.rows(), c);
        for i in 0..vw.rows() {
            for l in 0..k {
                let weight = vw.at(i, l);
                let src = vv.row(i * k + l);
                let dst = out.row_mut(i);
                for cc in 0..c {
                    dst[cc] += weight * src[cc];
                }
            }
        }
        let needs = self.needs(w) || self.needs(v);
        self.push(out, Op::WeightedGroupSum { w, v, k }, needs)
    }

    /// Per-row layer normalization with learnable 1xC gain and bias.
    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let c = vx.cols();
        assert_eq!(vg.cols(), c, "gain width mismatch");
        assert_eq!(vb.cols(), c, "bias width mismatch");
        let mut v = Matrix::zeros(vx.rows(), c);
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / fx::sqrt(var + eps);
            for cc in 0..c {
                let xn = (row[cc] - mean) * inv;
                *v.at_mut(r, cc) = vg.at(0, cc) * xn + vb.at(0, cc);
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(v, Op::LayerNormRows { x, gain, bias, eps }, needs)
    }

    /// Per-column standardization over rows (channel statistics of one
    /// cloud), with learnable 1xC gain and bias.
    pub fn col_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let (n, c) = (vx.rows(), vx.cols());
        assert_eq!(vg.cols(), c, "gain width mismatch");
        assert_eq!(vb.cols(), c, "bias width mismatch");
        let nf = n as f64;
        let mut v = Matrix::zeros(n, c);
        for col in 0..c {
            let mut mean = 0.0;
            for r in 0..n {
                mean += vx.at(r, col);
            }
            mean /= nf;
            let mut var = 0.0;
            for r in 0..n {
                let d = vx.at(r, col) - mean;
                var += d * d;
            }
            var /= nf;
            let inv = 1.0 / fx::sqrt(var + eps);
            for r in 0..n {
                *v.at_mut(r, col) = vg.at(0, col) * (vx.at(r, col) - mean) * inv + vb.at(0, col);
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(v, Op::ColNormRows { x, gain, bias, eps }, needs)
    }

    /// Mean smooth-L1: `mean(0.5 d^2 / beta if |d| < beta else |d| - 0.5 beta)`.
    pub fn smooth_l1(&mut self, a: NodeId, b: NodeId, beta: f64) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "smooth_l1 shape mismatch");
        assert!(beta > 0.0, "beta must be positive");
        let mut acc = 0.0;
        for (x, y) in va.as_slice().iter().zip(vb.as_slice()) {
            let d = x - y;
            acc += if d.abs() < beta {
                0.5 * d * d / beta
            } else {
                d.abs() - 0.5 * beta
            };
        }
        let v = Matrix::scalar(acc / va.len() as f64);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::SmoothL1 { a, b, beta }, needs)
    }

    /// Symmetric squared-mean Chamfer distance between two Nx3 matrices.
    pub fn chamfer(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), 3, "chamfer expects Nx3");
        assert_eq!(vb.cols(), 3, "chamfer expects Nx3");
        let nn = |from: &Matrix, to: &Matrix| -> (Vec<usize>, f64) {
            let mut idx = Vec::with_capacity(from.rows());
            let mut acc = 0.0;
            for i in 0..from.rows() {
                let p = from.row(i);
                let mut best = (f64::INFINITY, 0usize);
                for j in 0..to.rows() {
                    let q = to.row(j);
                    let d = (p[0] - q[0]) * (p[0] - q[0])
                        + (p[1] - q[1]) * (p[1] - q[1])
                        + (p[2] - q[2]) * (p[2] - q[2]);
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                idx.push(best.1);
                acc += best.0;
            }
            (idx, acc / from.rows() as f64)
        };
        let (nn_ab, d_ab) = nn(va, vb);
        let (nn_ba, d_ba) = nn(vb, va);
        let v = Matrix::scalar(d_ab + d_ba);
        let needs = self.needs(a) || self.needs(b);
        self.push(
            v,
            Op::Chamfer {
                a,
                b,
                nn_ab,
                nn_ba,
            },
            needs,
        )
    }

    /// `sum_t weights[t] * ||y[pairs[t].0] - y[pairs[t].1]||^2`.
    pub fn pairwise_shrink(
        &mut self,
        y: NodeId,
        pairs: Vec<(usize, usize)>,
        weights: Vec<f64>,
    ) -> NodeId {
        let vy = self.value(y);
        assert_eq!(pairs.len(), weights.len());
        let mut acc = 0.0;
        for (&(i, l), &w) in pairs.iter().zip(&weights) {
            let (pi, pl) = (vy.row(i), vy.row(l));
            let sq: f64 = pi.iter().zip(pl).map(|(x, y)| (x - y) * (x - y)).sum();
            acc += w * sq;
        }
        let v = Matrix::scalar(acc);
        let needs = self.needs(y);
        self.push(v, Op::PairwiseShrink { y, pairs, weights }, needs)
    }

    /// `-ln(max(probs[0, index], eps))` for a 1xM probability row.
    pub fn cross_entropy_index(&mut self, probs: NodeId, index: usize, eps: f64) -> NodeId {
        let vp = self.value(probs);
        assert_eq!(vp.rows(), 1, "expected a single probability row");
        assert!(index < vp.cols(), "label bin out of range");
        let v = Matrix::scalar(-fx::ln(vp.at(0, index).max(eps)));
        let needs = self.needs(probs);
        self.push(v, Op::CrossEntropyIndex { probs, index, eps }, needs)
    }

    /// Gradient reversal: identity forward, gradient scaled by `-weight`.
    pub fn grl(&mut self, a: NodeId, weight: f64) -> NodeId {
        let v = self.value(a).clone();
        let needs = self.needs(a);
        self.push(v, Op::Grl(a, weight), needs)
    }

    pub fn sum_entries(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        let needs = self.needs(a);
        self.push(v, Op::SumEntries(a), needs)
    }

    /// Runs the backward pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        if !node.needs_grad {
            return;
        }
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    add_into(grads, *a, &g.matmul_bt(self.value(*b)));
                }
                if self.needs(*b) {
                    add_into(grads, *b, &self.value(*a).matmul_at(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.needs(*a) {
                    add_into(grads, *a, &g.matmul(self.value(*b)));
                }
                if self.needs(*b) {
                    add_into(grads, *b, &g.matmul_at(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_into(grads, *a, g);
                }
                if self.needs(*b) {
                    add_into(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(grads, *a, g);
                }
                if self.needs(*b) {
                    scaled_add_into(grads, *b, g, -1.0, self.value(*b));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = self.value(*b);
                    let d = Matrix::from_fn(g.rows(), g.cols(), |r, c| g.at(r, c) * vb.at(r, c));
                    add_into(grads, *a, &d);
                }
                if self.needs(*b) {
                    let va = self.value(*a);
                    let d = Matrix::from_fn(g.rows(), g.cols(), |r, c| g.at(r, c) * va.at(r, c));
                    add_into(grads, *b, &d);
                }
            }
            Op::AddRow(a, bias) => {
                if self.needs(*a) {
                    add_into(grads, *a, g);
                }
                if self.needs(*bias) {
                    let mut d = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            *d.at_mut(0, c) += g.at(r, c);
                        }
                    }
                    add_into(grads, *bias, &d);
                }
            }
            Op::Scale(a, factor) => {
                let mut d = g.clone();
                d.scale_in_place(*factor);
                add_into(grads, *a, &d);
            }
            Op::Map(a, u) => {
                let va = self.value(*a);
                let d = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                    g.at(r, c) * u.deriv(va.at(r, c), out.at(r, c))
                });
                add_into(grads, *a, &d);
            }
            Op::GatherRows(a, idx) => {
                let buf = grad_buf(grads, *a, self.value(*a));
                for (r, &src) in idx.iter().enumerate() {
                    let grow = g.row(r);
                    let brow = buf.row_mut(src);
                    for c in 0..grow.len() {
                        brow[c] += grow[c];
                    }
                }
            }
            Op::GatherEntries { a, rows, cols_idx } => {
                let buf = grad_buf(grads, *a, self.value(*a));
                let oc = g.cols();
                for r in 0..g.rows() {
                    for c in 0..oc {
                        *buf.at_mut(rows[r * oc + c], cols_idx[r * oc + c]) += g.at(r, c);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                if self.needs(*a) {
                    let d = Matrix::from_fn(g.rows(), ca, |r, c| g.at(r, c));
                    add_into(grads, *a, &d);
                }
                if self.needs(*b) {
                    let cb = self.value(*b).cols();
                    let d = Matrix::from_fn(g.rows(), cb, |r, c| g.at(r, c + ca));
                    add_into(grads, *b, &d);
                }
            }
            Op::GroupMaxPool { a, argmax } => {
                let buf = grad_buf(grads, *a, self.value(*a));
                let c = g.cols();
                for i_out in 0..g.rows() {
                    for col in 0..c {
                        *buf.at_mut(argmax[i_out * c + col], col) += g.at(i_out, col);
                    }
                }
            }
            Op::ColMax { a, argmax } => {
                let buf = grad_buf(grads, *a, self.value(*a));
                for (col, &row) in argmax.iter().enumerate() {
                    *buf.at_mut(row, col) += g.at(0, col);
                }
            }
            Op::ColMean(a) => {
                let va = self.value(*a);
                let n = va.rows() as f64;
                let buf = grad_buf(grads, *a, va);
                for r in 0..buf.rows() {
                    for c in 0..buf.cols() {
                        *buf.at_mut(r, c) += g.at(0, c) / n;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let d = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                    let dot: f64 = (0..g.cols()).map(|cc| g.at(r, cc) * out.at(r, cc)).sum();
                    (g.at(r, c) - dot) * out.at(r, c)
                });
                add_into(grads, *a, &d);
            }
            Op::RowNormalize { a, eps } => {
                let va = self.value(*a);
                let mut d = Matrix::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let norm = fx::sqrt(va.row(r).iter().map(|x| x * x).sum());
                    if norm > *eps {
                        let dot: f64 = (0..va.cols()).map(|c| g.at(r, c) * out.at(r, c)).sum();
                        for c in 0..va.cols() {
                            *d.at_mut(r, c) = (g.at(r, c) - out.at(r, c) * dot) / norm;
                        }
                    } else {
                        for c in 0..va.cols() {
                            *d.at_mut(r, c) = g.at(r, c) / eps;
                        }
                    }
                }
                add_into(grads, *a, &d);
            }
            Op::Transpose(a) => {
                add_into(grads, *a, &g.transpose());
            }
            Op::WeightedGroupSum { w, v, k } => {
                let (vw, vv) = (self.value(*w), self.value(*v));
                if self.needs(*w) {
                    let d = Matrix::from_fn(vw.rows(), *k, |i, l| {
                        let src = vv.row(i * k + l);
                        (0..vv.cols()).map(|c| g.at(i, c) * src[c]).sum()
                    });
                    add_into(grads, *w, &d);
                }
                if self.needs(*v) {
                    let d = Matrix::from_fn(vv.rows(), vv.cols(), |row, c| {
                        let (i, l) = (row / k, row % k);
                        vw.at(i, l) * g.at(i, c)
                    });
                    add_into(grads, *v, &d);
                }
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let c = vx.cols();
                let cf = c as f64;
                let mut dx = Matrix::zeros(vx.rows(), c);
                let mut dgain = Matrix::zeros(1, c);
                let mut dbias = Matrix::zeros(1, c);
                for r in 0..vx.rows() {
                    let row = vx.row(r);
                    let mean = row.iter().sum::<f64>() / cf;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cf;
                    let inv = 1.0 / fx::sqrt(var + eps);
                    // dxn = g * gain; dx via the two projection terms.
                    let mut mean_dxn = 0.0;
                    let mut mean_dxn_xn = 0.0;
                    for cc in 0..c {
                        let xn = (row[cc] - mean) * inv;
                        let dxn = g.at(r, cc) * vg.at(0, cc);
                        mean_dxn += dxn;
                        mean_dxn_xn += dxn * xn;
                        *dgain.at_mut(0, cc) += g.at(r, cc) * xn;
                        *dbias.at_mut(0, cc) += g.at(r, cc);
                    }
                    mean_dxn /= cf;
                    mean_dxn_xn /= cf;
                    for cc in 0..c {
                        let xn = (row[cc] - mean) * inv;
                        let dxn = g.at(r, cc) * vg.at(0, cc);
                        *dx.at_mut(r, cc) = inv * (dxn - mean_dxn - xn * mean_dxn_xn);
                    }
                }
                if self.needs(*x) {
                    add_into(grads, *x, &dx);
                }
                if self.needs(*gain) {
                    add_into(grads, *gain, &dgain);
                }
                if self.needs(*bias) {
                    add_into(grads, *bias, &dbias);
                }
            }
            Op::ColNormRows { x, gain, bias, eps } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let (n, c) = (vx.rows(), vx.cols());
                let nf = n as f64;
                let mut dx = Matrix::zeros(n, c);
                let mut dgain = Matrix::zeros(1, c);
                let mut dbias = Matrix::zeros(1, c);
                for col in 0..c {
                    let mut mean = 0.0;
                    for r in 0..n {
                        mean += vx.at(r, col);
                    }
                    mean /= nf;
                    let mut var = 0.0;
                    for r in 0..n {
                        let d = vx.at(r, col) - mean;
                        var += d * d;
                    }
                    var /= nf;
                    let inv = 1.0 / fx::sqrt(var + eps);
                    let mut mean_dxn = 0.0;
                    let mut mean_dxn_xn = 0.0;
                    for r in 0..n {
                        let xn = (vx.at(r, col) - mean) * inv;
                        let dxn = g.at(r, col) * vg.at(0, col);
                        mean_dxn += dxn;
                        mean_dxn_xn += dxn * xn;
                        *dgain.at_mut(0, col) += g.at(r, col) * xn;
                        *dbias.at_mut(0, col) += g.at(r, col);
                    }
                    mean_dxn /= nf;
                    mean_dxn_xn /= nf;
                    for r in 0..n {
                        let xn = (vx.at(r, col) - mean) * inv;
                        let dxn = g.at(r, col) * vg.at(0, col);
                        *dx.at_mut(r, col) = inv * (dxn - mean_dxn - xn * mean_dxn_xn);
                    }
                }
                if self.needs(*x) {
                    add_into(grads, *x, &dx);
                }
                if self.needs(*gain) {
                    add_into(grads, *gain, &dgain);
                }
                if self.needs(*bias) {
                    add_into(grads, *bias, &dbias);
                }
            }
            Op::SmoothL1 { a, b, beta } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let go = g.item() / va.len() as f64;
                let d = Matrix::from_fn(va.rows(), va.cols(), |r, c| {
                    let diff = va.at(r, c) - vb.at(r, c);
                    let t = if diff.abs() < *beta {
                        diff / beta
                    } else {
                        diff.signum()
                    };
                    go * t
                });
                if self.needs(*a) {
                    add_into(grads, *a, &d);
                }
                if self.needs(*b) {
                    let mut dn = d;
                    dn.scale_in_place(-1.0);
                    add_into(grads, *b, &dn);
                }
            }
            Op::Chamfer { a, b, nn_ab, nn_ba } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let go = g.item();
                let (na, nb) = (va.rows() as f64, vb.rows() as f64);
                let mut da = Matrix::zeros(va.rows(), 3);
                let mut db = Matrix::zeros(vb.rows(), 3);
                for (i, &j) in nn_ab.iter().enumerate() {
                    for c in 0..3 {
                        let diff = va.at(i, c) - vb.at(j, c);
                        *da.at_mut(i, c) += go * 2.0 * diff / na;
                        *db.at_mut(j, c) -= go * 2.0 * diff / na;
                    }
                }
                for (j, &i) in nn_ba.iter().enumerate() {
                    for c in 0..3 {
                        let diff = vb.at(j, c) - va.at(i, c);
                        *db.at_mut(j, c) += go * 2.0 * diff / nb;
                        *da.at_mut(i, c) -= go * 2.0 * diff / nb;
                    }
                }
                if self.needs(*a) {
                    add_into(grads, *a, &da);
                }
                if self.needs(*b) {
                    add_into(grads, *b, &db);
                }
            }
            Op::PairwiseShrink { y, pairs, weights } => {
                let vy = self.value(*y);
                let go = g.item();
                let buf = grad_buf(grads, *y, vy);
                for (&(i, l), &w) in pairs.iter().zip(weights) {
                    for c in 0..vy.cols() {
                        let diff = vy.at(i, c) - vy.at(l, c);
                        *buf.at_mut(i, c) += go * 2.0 * w * diff;
                        *buf.at_mut(l, c) -= go * 2.0 * w * diff;
                    }
                }
            }
            Op::CrossEntropyIndex { probs, index, eps } => {
                let vp = self.value(*probs);
                let p = vp.at(0, *index);
                let mut d = Matrix::zeros(1, vp.cols());
                if p > *eps {
                    *d.at_mut(0, *index) = -g.item() / p;
                }
                add_into(grads, *probs, &d);
            }
            Op::Grl(a, weight) => {
                let mut d = g.clone();
                d.scale_in_place(-weight);
                add_into(grads, *a, &d);
            }
            Op::SumEntries(a) => {
                let va = self.value(*a);
                let go = g.item();
                let d = Matrix::from_fn(va.rows(), va.cols(), |_, _| go);
                add_into(grads, *a, &d);
            }
        }
    }
}

fn add_into(grads: &mut [Option<Matrix>], id: NodeId, delta: &Matrix) {
    match &mut grads[id.0] {
        Some(buf) => buf.axpy(1.0, delta),
        slot @ None => *slot = Some(delta.clone()),
    }
}

fn scaled_add_into(grads: &mut [Option<Matrix>], id: NodeId, delta: &Matrix, alpha: f64, like: &Matrix) {
    match &mut grads[id.0] {
        Some(buf) => buf.axpy(alpha, delta),
        slot @ None => {
            let mut buf = Matrix::zeros(like.rows(), like.cols());
            buf.axpy(alpha, delta);
            *slot = Some(buf);
        }
    }
}

/// Ensures a zeroed gradient buffer exists for `id` and returns it.
fn grad_buf<'g>(grads: &'g mut [Option<Matrix>], id: NodeId, like: &Matrix) -> &'g mut Matrix {
    grads[id.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads[id.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = SeedRng::new(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-1.5, 1.5))
    }

    /// Central finite differences on a rebuilt graph versus one backward pass.
    fn gradcheck(
        param0: &Matrix,
        build: &dyn Fn(&mut Graph, NodeId) -> NodeId,
        step: f64,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let p = g.param(param0);
        let loss = build(&mut g, p);
        let grads = g.backward(loss);
        let analytic = grads.get(p).expect("no gradient for probed leaf");

        let eval = |m: &Matrix| -> f64 {
            let mut g = Graph::new();
            let p = g.param(m);
            let loss = build(&mut g, p);
            g.value(loss).item()
        };

        let mut fd = Matrix::zeros(param0.rows(), param0.cols());
        let mut probe = param0.clone();
        for r in 0..param0.rows() {
            for c in 0..param0.cols() {
                let orig = probe.at(r, c);
                *probe.at_mut(r, c) = orig + step;
                let plus = eval(&probe);
                *probe.at_mut(r, c) = orig - step;
                let minus = eval(&probe);
                *probe.at_mut(r, c) = orig;
                *fd.at_mut(r, c) = (plus - minus) / (2.0 * step);
            }
        }

        let mut diff = fd.clone();
        diff.axpy(-1.0, analytic);
        let rel = diff.frob_norm() / fd.frob_norm().max(analytic.frob_norm()).max(1e-12);
        assert!(
            rel < tol,
            "gradcheck rel err {rel} exceeds {tol}\nfd {fd:?}\nanalytic {analytic:?}"
        );
    }

    #[test]
    fn grad_matmul_chain() {
        let p0 = random_matrix(4, 3, 1);
        let other = random_matrix(3, 5, 2);
        gradcheck(
            &p0,
            &move |g, p| {
                let o = g.constant(other.clone());
                let mm = g.matmul(p, o);
                let act = g.leaky_relu(mm, 0.2);
                g.sum_entries(act)
            },
            1e-6,
            1e-7,
        );
    }

    #[test]
    fn grad_matmul_bt_and_transpose() {
        let p0 = random_matrix(4, 3, 3);
        let other = random_matrix(6, 3, 4);
        gradcheck(
            &p0,
            &move |g, p| {
                let o = g.constant(other.clone());
                let s = g.matmul_bt(p, o);
                let t = g.transpose(s);
                let sq = g.mul(t, t);
                g.sum_entries(sq)
            },
            1e-6,
            1e-7,
        );
    }

    #[test]
    fn grad_elementwise_ops() {
        let p0 = random_matrix(3, 4, 5);
        let other = random_matrix(3, 4, 6);
        gradcheck(
            &p0,
            &move |g, p| {
                let o = g.constant(other.clone());
                let a = g.add(p, o);
                let s = g.sub(a, p);
                let m = g.mul(s, p);
                let sc = g.scale(m, 0.7);
                g.sum_entries(sc)
            },
            1e-6,
            1e-7,
        );
    }

    #[test]
    fn grad_add_row_bias() {
        let p0 = random_matrix(1, 5, 7);
        let base = random_matrix(6, 5, 8);
        gradcheck(
            &p0,
            &move |g, p| {
                let b = g.constant(base.clone());
                let out = g.add_row(b, p);
                let act = g.sigmoid(out);
                g.sum_entries(act)
            },
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn grad_gather_and_group_max() {
        let p0 = random_matrix(5, 3, 9);
        gradcheck(
            &p0,
            &|g, p| {
                let gathered = g.gather_rows(p, vec![0, 2, 4, 1, 1, 3]);
                let pooled = g.group_max_pool(gathered, 2);
                g.sum_entries(pooled)
            },
            1e-6,
            1e-7,
        );
    }

    #[test]
    fn grad_gather_entries_with_softmax() {
        let p0 = random_matrix(4, 4, 30);
        gradcheck(
            &p0,
            &|g, p| {
                // Two entries per output row, including a repeated source entry.
                let rows = vec![0, 0, 1, 1, 2, 3, 0, 0];
                let cols = vec![1, 3, 0, 2, 2, 1, 1, 1];
                let picked = g.gather_entries(p, 4, 2, rows, cols);
                let w = g.softmax_rows(picked);
                let sq = g.mul(w, w);
                g.sum_entries(sq)
            },
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn grad_concat_and_pools() {
        let p0 = random_matrix(4, 3, 10);
        gradcheck(
            &p0,
            &|g, p| {
                let mx = g.col_max(p);
                let mn = g.col_mean(p);
                let cat = g.concat_cols(mx, mn);
                let act = g.relu(cat);
                g.sum_entries(act)
            },
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn grad_softmax_rows() {
        let p0 = random_matrix(3, 6, 11);
        let w = random_matrix(3, 6, 12);
        gradcheck(
            &p0,
            &move |g, p| {
                let s = g.softmax_rows(p);
                let c = g.constant(w.clone());
                let prod = g.mul(s, c);
                g.sum_entries(prod)
            },
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn grad_row_normalize() {
        let p0 = random_matrix(4, 5, 13);
        let w = random_matrix(4, 5, 14);
        gradcheck(
            &p0,
            &move |g, p| {
                let n = g.row_normalize(p, 1e-8);
                let c = g.constant(w.clone());
                let prod = g.mul(n, c);
                g.sum_entries(prod)
            },
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn row_normalize_clamps_zero_rows_without_nan() {
        reset_norm_clamp_count();
        let mut g = Graph::new();
        let m = Matrix::from_vec(2, 3, vec![0.0, 0.0, 0.0, 3.0, 4.0, 0.0]).unwrap();
        let p = g.param(&m);
        let n = g.row_normalize(p, 1e-8);
        assert!(g.value(n).is_finite());
        assert_eq!(norm_clamp_count(), 1);
        let loss = g.sum_entries(n);
        let grads = g.backward(loss);
        assert!(grads.get(p).unwrap().is_finite());
    }

    #[test]
    fn grad_weighted_group_sum_both_sides() {
        let w0 = random_matrix(3, 2, 15);
        let vals = random_matrix(6, 3, 16);
        gradcheck(
            &w0,
            &{
                let vals = vals.clone();
                move |g, p| {
                    let v = g.constant(vals.clone());
                    let out = g.weighted_group_sum(p, v, 2);
                    g.sum_entries(out)
                }
            },
            1e-6,
            1e-7,
        );
        let w = random_matrix(3, 2, 17);
        gradcheck(
            &vals,
            &move |g, p| {
                let wn = g.constant(w.clone());
                let out = g.weighted_group_sum(wn, p, 2);
                let sq = g.mul(out, out);
                g.sum_entries(sq)
            },
            1e-6,
            1e-7,
        );
    }

    #[test]
    fn grad_layer_norm_all_inputs() {
        let x0 = random_matrix(3, 7, 18);
        let gain = random_matrix(1, 7, 19);
        let bias = random_matrix(1, 7, 20);
        gradcheck(
            &x0,
            &{
                let (gain, bias) = (gain.clone(), bias.clone());
                move |g, p| {
                    let gn = g.param(&gain);
                    let bn = g.param(&bias);
                    let out = g.layer_norm_rows(p, gn, bn, 1e-5);
                    let act = g.sigmoid(out);
                    g.sum_entries(act)
                }
            },
            1e-6,
            1e-5,
        );
        gradcheck(
            &gain,
            &{
                let (x0, bias) = (x0.clone(), bias.clone());
                move |g, p| {
                    let xn = g.constant(x0.clone());
                    let bn = g.constant(bias.clone());
                    let out = g.layer_norm_rows(xn, p, bn, 1e-5);
                    g.sum_entries(out)
                }
            },
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn grad_col_norm_all_inputs() {
        let x0 = random_matrix(6, 4, 31);
        let gain = random_matrix(1, 4, 32);
        let bias = random_matrix(1, 4, 33);
        gradcheck(
            &x0,
            &{
                let (gain, bias) = (gain.clone(), bias.clone());
                move |g, p| {
                    let gn = g.param(&gain);
                    let bn = g.param(&bias);
                    let out = g.col_norm_rows(p, gn, bn, 1e-5);
                    let act = g.sigmoid(out);
                    g.sum_entries(act)
                }
            },
            1e-6,
            1e-5,
        );
        gradcheck(
            &gain,
            &{
                let (x0, bias) = (x0.clone(), bias.clone());
                move |g, p| {
                    let xn = g.constant(x0.clone());
                    let bn = g.constant(bias.clone());
                    let out = g.col_norm_rows(xn, p, bn, 1e-5);
                    let sq = g.mul(out, out);
                    g.sum_entries(sq)
                }
            },
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn grad_smooth_l1_spans_both_branches() {
        // Mixed magnitudes so both quadratic and linear branches are active.
        let p0 = Matrix::from_vec(2, 3, vec![0.3, -2.0, 0.05, 1.7, -0.4, 3.0]).unwrap();
        let target = Matrix::zeros(2, 3);
        gradcheck(
            &p0,
            &move |g, p| {
                let t = g.constant(target.clone());
                g.smooth_l1(p, t, 1.0)
            },
            1e-6,
            1e-7,
        );
    }

    #[test]
    fn grad_chamfer_both_clouds() {
        let a0 = random_matrix(5, 3, 21);
        let b0 = random_matrix(7, 3, 22);
        gradcheck(
            &a0,
            &{
                let b0 = b0.clone();
                move |g, p| {
                    let b = g.constant(b0.clone());
                    g.chamfer(p, b)
                }
            },
            1e-6,
            1e-6,
        );
        gradcheck(
            &b0,
            &move |g, p| {
                let a = g.constant(a0.clone());
                g.chamfer(a, p)
            },
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn grad_pairwise_shrink() {
        let p0 = random_matrix(5, 3, 23);
        gradcheck(
            &p0,
            &|g, p| g.pairwise_shrink(p, vec![(0, 1), (1, 2), (3, 4)], vec![0.5, 1.5, 2.0]),
            1e-6,
            1e-7,
        );
    }

    #[test]
    fn grad_cross_entropy_index() {
        let p0 = random_matrix(1, 8, 24);
        gradcheck(
            &p0,
            &|g, p| {
                let probs = g.softmax_rows(p);
                g.cross_entropy_index(probs, 3, 1e-12)
            },
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn grad_focal_composition() {
        let p0 = Matrix::scalar(0.3);
        gradcheck(
            &p0,
            &|g, p| {
                let d = g.sigmoid(p);
                let om = g.one_minus(d);
                let pw = g.pow_const(om, 2.0);
                let ln = g.ln_clamped(d, 1e-12);
                let prod = g.mul(pw, ln);
                g.scale(prod, -1.0)
            },
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn grl_negates_gradient_exactly() {
        let p0 = random_matrix(2, 3, 25);
        // Probe: loss = sum(grl(x) * c). d loss/dx should be -1 * c.
        let c = random_matrix(2, 3, 26);
        let mut g = Graph::new();
        let p = g.param(&p0);
        let rev = g.grl(p, 1.0);
        let cn = g.constant(c.clone());
        let prod = g.mul(rev, cn);
        let loss = g.sum_entries(prod);
        let grads = g.backward(loss);
        let got = grads.get(p).unwrap();
        let mut want = c.clone();
        want.scale_in_place(-1.0);
        assert!(got.max_abs_diff(&want) < 1e-15);
        // The discriminator-side gradient (at the GRL output) is the exact negation.
        let disc_side = grads.get(rev).unwrap();
        let mut sum = disc_side.clone();
        sum.axpy(1.0, got);
        assert!(sum.frob_norm() < 1e-15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(random_matrix(3, 3, 27));
        let p = g.param(&random_matrix(3, 3, 28));
        let prod = g.mul(a, p);
        let loss = g.sum_entries(prod);
        let grads = g.backward(loss);
        assert!(grads.get(a).is_none());
        assert!(grads.get(p).is_some());
    }

    #[test]
    fn backward_is_deterministic() {
        let p0 = random_matrix(6, 4, 29);
        let run = || {
            let mut g = Graph::new();
            let p = g.param(&p0);
            let n = g.row_normalize(p, 1e-8);
            let s = g.matmul_bt(n, n);
            let sm = g.softmax_rows(s);
            let loss = g.sum_entries(sm);
            let grads = g.backward(loss);
            grads.get(p).unwrap().clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}
