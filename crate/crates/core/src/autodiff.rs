//! Reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Tape`] records one forward pass. Parameters are borrowed from a
//! [`ParamSet`] rather than copied; inputs enter as constants and never
//! receive gradients. Calling [`Tape::backward`] with seed gradients for
//! any number of output nodes returns a [`Grads`] aligned with the set.

use std::borrow::Cow;

use crate::params::{Grads, ParamId, ParamSet};
use crate::tensor::Mat;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// Adds a 1×n row to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Gelu(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
}

struct Node<'p> {
    value: Cow<'p, Mat>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node<'p>>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn push(&mut self, value: Cow<'p, Mat>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(Cow::Owned(m), Op::Const, false)
    }

    pub fn constant_ref(&mut self, m: &'p Mat) -> Var {
        self.push(Cow::Borrowed(m), Op::Const, false)
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let params = self.params;
        let v = self.push(Cow::Borrowed(params.get(id)), Op::Param(id), true);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(out), Op::MatMul(a, b), ng)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(out), Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(out), Op::Add(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a 1×n row");
        assert_eq!(r.cols(), self.value(a).cols());
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(Cow::Owned(out), Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let ng = self.needs(a);
        self.push(Cow::Owned(out), Op::Scale(a, c), ng)
    }

    /// Row-wise layer normalization with learned 1×n gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        assert_eq!(g.len(), cols);
        assert_eq!(b.len(), cols);
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let ng = self.needs(x);
        self.push(Cow::Owned(out), Op::SoftmaxRows(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let ng = self.needs(x);
        self.push(Cow::Owned(out), Op::Gelu(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols());
        let mut out = Mat::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.needs(x);
        self.push(Cow::Owned(out), Op::SliceCols(x, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Gathers rows by index; indices may repeat (embedding lookup).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(idx.len(), xv.cols());
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(xv.row(i));
        }
        let ng = self.needs(x);
        self.push(Cow::Owned(out), Op::SelectRows(x, idx.to_vec()), ng)
    }

    pub fn row(&mut self, x: Var, i: usize) -> Var {
        self.select_rows(x, &[i])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols);
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Cow::Owned(Mat::from_vec(rows, cols, data)),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    /// Back-propagates the given output gradients through the tape.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Grads {
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(*v).shape(), "seed shape");
            acc(&mut grads, *v, Cow::Borrowed(g));
        }
        let mut out = Grads::zeros_like(self.params);
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out.accumulate_owned(*id, g),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul_nt(self.value(*b));
                        acc(&mut grads, *a, Cow::Owned(ga));
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).matmul_tn(&g);
                        acc(&mut grads, *b, Cow::Owned(gb));
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul(self.value(*b));
                        acc(&mut grads, *a, Cow::Owned(ga));
                    }
                    if self.needs(*b) {
                        let gb = g.matmul_tn(self.value(*a));
                        acc(&mut grads, *b, Cow::Owned(gb));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, Cow::Borrowed(&g));
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, Cow::Borrowed(&g));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let mut gr = Mat::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, *row, Cow::Owned(gr));
                    }
                    if self.needs(*a) {
                        acc(&mut grads, *a, Cow::Owned(g));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, Cow::Owned(g.scale(*c))),
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = g.shape();
                    if self.needs(*gain) {
                        let mut gg = Mat::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            }
                        }
                        acc(&mut grads, *gain, Cow::Owned(gg));
                    }
                    if self.needs(*bias) {
                        let mut gb = Mat::zeros(1, cols);
                        for r in 0..rows {
                            for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, *bias, Cow::Owned(gb));
                    }
                    if self.needs(*x) {
                        let gain_v = self.value(*gain).data();
                        let n = cols as f64;
                        let mut gx = Mat::zeros(rows, cols);
                        for r in 0..rows {
                            let dxhat: Vec<f64> =
                                (0..cols).map(|c| g.get(r, c) * gain_v[c]).collect();
                            let sum: f64 = dxhat.iter().sum();
                            let sum_h: f64 =
                                (0..cols).map(|c| dxhat[c] * xhat.get(r, c)).sum();
                            for c in 0..cols {
                                let v = inv_std[r] / n
                                    * (n * dxhat[c] - sum - xhat.get(r, c) * sum_h);
                                gx.set(r, c, v);
                            }
                        }
                        acc(&mut grads, *x, Cow::Owned(gx));
                    }
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - s);
                        }
                    }
                    acc(&mut grads, *x, Cow::Owned(gx));
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (o, &xi) in gx.data_mut().iter_mut().zip(xv.data()) {
                        *o *= gelu_grad(xi);
                    }
                    acc(&mut grads, *x, Cow::Owned(gx));
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, Cow::Owned(gx));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        if self.needs(p) {
                            let mut gp = Mat::zeros(g.rows(), pc);
                            for r in 0..g.rows() {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + pc]);
                            }
                            acc(&mut grads, p, Cow::Owned(gp));
                        }
                        offset += pc;
                    }
                }
                Op::SelectRows(x, idx) => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    for (o, &i) in idx.iter().enumerate() {
                        for (a, b) in gx.row_mut(i).iter_mut().zip(g.row(o)) {
                            *a += b;
                        }
                    }
                    acc(&mut grads, *x, Cow::Owned(gx));
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pr = self.value(p).rows();
                        if self.needs(p) {
                            let cols = g.cols();
                            let gp = Mat::from_vec(
                                pr,
                                cols,
                                g.data()[offset * cols..(offset + pr) * cols].to_vec(),
                            );
                            acc(&mut grads, p, Cow::Owned(gp));
                        }
                        offset += pr;
                    }
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Cow<'_, Mat>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g.into_owned()),
    }
}

/// Numerically stable row softmax (max-subtracted).
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}
