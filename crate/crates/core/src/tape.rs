//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every forward computation in the model (inference included) is recorded on a
//! [`Tape`]. Leaves are either parameters, which receive gradients, or constants,
//! which do not; nodes that cannot reach a parameter are skipped entirely during
//! the backward sweep so frozen weights cost nothing beyond the forward pass.

use ndarray::{s, Array2, Axis};

use crate::Matrix;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Matrix>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// A trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf: no gradient is computed for it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`; weights stored as `out × in` use this.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a `1 × m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        assert_eq!(r.ncols(), self.value(a).ncols(), "add_row width");
        let value = self.value(a) + r;
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows width");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn row(&mut self, a: Var, index: usize) -> Var {
        let value = self.value(a).slice(s![index..index + 1, ..]).to_owned();
        let ng = self.needs(a);
        self.push(value, Op::Row(a, index), ng)
    }

    pub fn last_row(&mut self, a: Var) -> Var {
        let n = self.value(a).nrows();
        self.row(a, n - 1)
    }

    /// Per-row normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let ng = self.needs(a);
        self.push(out, Op::LayerNorm { input: a, inv_std }, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `n × d`, `k` and `v` are `m × d`, heads split `d` evenly. With
    /// `causal` set, query `i` only sees keys `0..=i` (requires `n == m`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.dim();
        let m = kv.nrows();
        assert_eq!(kv.ncols(), d, "attention key width");
        assert_eq!(vv.dim(), (m, d), "attention value shape");
        assert!(heads >= 1 && d % heads == 0, "heads must divide width");
        if causal {
            assert_eq!(n, m, "causal attention needs square scores");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = qv.slice(cols).dot(&kv.slice(cols).t()) * scale;
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                let visible = if causal { i + 1 } else { m };
                let max = row
                    .iter()
                    .take(visible)
                    .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut sum = 0.0;
                for (j, x) in row.iter_mut().enumerate() {
                    if j < visible {
                        *x = (*x - max).exp();
                        sum += *x;
                    } else {
                        *x = 0.0;
                    }
                }
                row.mapv_inplace(|x| x / sum);
            }
            out.slice_mut(cols).assign(&scores.dot(&vv.slice(cols)));
            probs.push(scores);
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: Var, seed: Matrix) -> Gradients {
        assert_eq!(self.value(output).dim(), seed.dim(), "seed shape");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        fn accumulate(grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
            match &mut grads[var.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.dot(&self.value(*b).t()));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, self.value(*a).t().dot(&dy));
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.dot(self.value(*b)));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let sum = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, sum);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy);
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, dy * *c);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        if self.needs(p) {
                            let g = dy.slice(s![start..start + rows, ..]).to_owned();
                            accumulate(&mut grads, p, g);
                        }
                        start += rows;
                    }
                }
                Op::Row(a, index) => {
                    let mut g = Array2::zeros(self.value(*a).dim());
                    g.row_mut(*index).assign(&dy.row(0));
                    accumulate(&mut grads, *a, g);
                }
                Op::LayerNorm { input, inv_std } => {
                    let y = &node.value;
                    let mut g = Array2::zeros(y.dim());
                    for (r, mut grow) in g.rows_mut().into_iter().enumerate() {
                        let yr = y.row(r);
                        let dr = dy.row(r);
                        let n = yr.len() as f64;
                        let mean_d = dr.sum() / n;
                        let mean_dy = dr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((gv, &d), &yv) in grow.iter_mut().zip(dr.iter()).zip(yr.iter()) {
                            *gv = inv_std[r] * (d - mean_d - yv * mean_dy);
                        }
                    }
                    accumulate(&mut grads, *input, g);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut g = dy;
                    g.zip_mut_with(x, |gv, &xv| *gv *= gelu_grad(xv));
                    accumulate(&mut grads, *a, g);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let dout = dy.slice(cols);
                        let dp = dout.dot(&vv.slice(cols).t());
                        dv.slice_mut(cols).assign(&p.t().dot(&dout));
                        let mut ds = dp;
                        for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                            drow.zip_mut_with(&prow, |dv, &pv| *dv = pv * (*dv - dot));
                        }
                        ds *= scale;
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    if self.needs(*q) {
                        accumulate(&mut grads, *q, dq);
                    }
                    if self.needs(*k) {
                        accumulate(&mut grads, *k, dk);
                    }
                    if self.needs(*v) {
                        accumulate(&mut grads, *v, dv);
                    }
                }
            }
        }
        Gradients { grads }
    }
}
