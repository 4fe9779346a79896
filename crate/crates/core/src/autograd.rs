//! A small reverse-mode tape over [`Mat`] values.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid reverse topological order. Parameter leaves borrow their value from
//! the [`ParamStore`] instead of copying it.

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, softmax_into, Mat, Op};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Kind {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Broadcast a `1 × n` row over every row of the first operand.
    AddRow(NodeId, NodeId),
    AddConst(NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Mat),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(NodeId),
    ColSlice {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Gather {
        table: NodeId,
        rows: Vec<usize>,
    },
    WeightedRowSum {
        x: NodeId,
        weights: Vec<f64>,
    },
    ReplaceRows {
        x: NodeId,
        row: NodeId,
        mask: Vec<bool>,
    },
    /// Scalar whose gradient with respect to `x` was computed externally.
    Loss {
        x: NodeId,
        grad: Mat,
    },
    Combine(Vec<(NodeId, f64)>),
}

struct Node {
    kind: Kind,
    value: Option<Mat>,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        let node = &self.nodes[id.0];
        match node.kind {
            Kind::Param(p) => self.params.get(p),
            _ => node.value.as_ref().expect("non-param node without value"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.data()[0]
    }

    fn push(&mut self, kind: Kind, value: Option<Mat>) -> NodeId {
        self.nodes.push(Node { kind, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(Kind::Input, Some(value))
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.push(Kind::Param(id), None)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Kind::MatMul(a, b), Some(v))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(va.rows(), vb.rows());
        gemm(Op::N, va, Op::T, vb, 0.0, &mut out);
        self.push(Kind::MatMulBt(a, b), Some(out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Kind::Add(a, b), Some(v))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        let r = self.value(row);
        assert_eq!(r.shape(), (1, v.cols()), "add_row: bias shape");
        for i in 0..v.rows() {
            for (a, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *a += b;
            }
        }
        self.push(Kind::AddRow(x, row), Some(v))
    }

    pub fn add_const(&mut self, x: NodeId, c: &Mat) -> NodeId {
        let mut v = self.value(x).clone();
        v.add_assign(c);
        self.push(Kind::AddConst(x), Some(v))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let mut v = self.value(x).clone();
        v.scale(k);
        self.push(Kind::Scale(x, k), Some(v))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: NodeId, c: Mat) -> NodeId {
        let mut v = self.value(x).clone();
        assert_eq!(v.shape(), c.shape(), "mul_const: shape");
        for (a, b) in v.data_mut().iter_mut().zip(c.data()) {
            *a *= b;
        }
        self.push(Kind::MulConst(x, c), Some(v))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for a in v.data_mut() {
            let x = *a;
            *a = 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh());
        }
        self.push(Kind::Gelu(x), Some(v))
    }

    /// Row-wise layer normalization with learned `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            Kind::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            Some(out),
        )
    }

    /// Row softmax. With `causal`, entry `(i, j)` for `j > i` is forced to 0.
    pub fn softmax(&mut self, x: NodeId, causal: bool) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let width = if causal { (r + 1).min(cols) } else { cols };
            let src = &vx.row(r)[..width];
            softmax_into(src, &mut out.row_mut(r)[..width]);
        }
        self.push(Kind::Softmax(x), Some(out))
    }

    pub fn col_slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = self.value(x);
        let mut out = Mat::zeros(vx.rows(), len);
        for r in 0..vx.rows() {
            out.row_mut(r)
                .copy_from_slice(&vx.row(r)[start..start + len]);
        }
        self.push(Kind::ColSlice { x, start }, Some(out))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in &parts {
            let v = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        self.push(Kind::ConcatCols(parts), Some(out))
    }

    /// Embedding lookup: row `i` of the output is row `rows[i]` of `table`.
    pub fn gather(&mut self, table: NodeId, rows: Vec<usize>) -> NodeId {
        let t = self.value(table);
        let mut out = Mat::zeros(rows.len(), t.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(r));
        }
        self.push(Kind::Gather { table, rows }, Some(out))
    }

    /// `1 × n` output `Σᵢ weights[i] · x[i]`.
    pub fn weighted_row_sum(&mut self, x: NodeId, weights: Vec<f64>) -> NodeId {
        let vx = self.value(x);
        assert_eq!(weights.len(), vx.rows(), "weighted_row_sum: weights");
        let mut out = Mat::zeros(1, vx.cols());
        for (r, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                for (o, v) in out.data_mut().iter_mut().zip(vx.row(r)) {
                    *o += w * v;
                }
            }
        }
        self.push(Kind::WeightedRowSum { x, weights }, Some(out))
    }

    /// Rows where `mask` is true are replaced by the `1 × n` node `row`.
    pub fn replace_rows(&mut self, x: NodeId, row: NodeId, mask: Vec<bool>) -> NodeId {
        let mut out = self.value(x).clone();
        let r = self.value(row);
        assert_eq!(r.shape(), (1, out.cols()), "replace_rows: row shape");
        assert_eq!(mask.len(), out.rows(), "replace_rows: mask length");
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(i).copy_from_slice(r.data());
            }
        }
        self.push(Kind::ReplaceRows { x, row, mask }, Some(out))
    }

    /// Attaches a scalar loss with a precomputed gradient w.r.t. `x`.
    pub fn loss(&mut self, x: NodeId, value: f64, grad: Mat) -> NodeId {
        assert_eq!(self.value(x).shape(), grad.shape(), "loss: grad shape");
        self.push(Kind::Loss { x, grad }, Some(Mat::filled(1, 1, value)))
    }

    /// Attaches a scalar node whose value was computed by the caller as a
    /// linear combination of `terms`; backward uses the weights.
    pub fn combine(&mut self, terms: Vec<(NodeId, f64)>, value: f64) -> NodeId {
        self.push(Kind::Combine(terms), Some(Mat::filled(1, 1, value)))
    }

    /// Backpropagates from a `1 × 1` root and returns parameter gradients.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut out = self.params.zero_grads();
        self.backward_into(root, &mut out);
        out
    }

    pub fn backward_into(&self, root: NodeId, out: &mut Gradients) {
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Mat::filled(1, 1, 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].kind {
                Kind::Input => {}
                Kind::Param(p) => out.0[p.index()].add_assign(&g),
                Kind::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut da = Mat::zeros(va.rows(), va.cols());
                    gemm(Op::N, &g, Op::T, vb, 0.0, &mut da);
                    let mut db = Mat::zeros(vb.rows(), vb.cols());
                    gemm(Op::T, va, Op::N, &g, 0.0, &mut db);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Kind::MatMulBt(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut da = Mat::zeros(va.rows(), va.cols());
                    gemm(Op::N, &g, Op::N, vb, 0.0, &mut da);
                    let mut db = Mat::zeros(vb.rows(), vb.cols());
                    gemm(Op::T, &g, Op::N, va, 0.0, &mut db);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Kind::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Kind::AddRow(x, row) => {
                    let mut db = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *row, db);
                    acc(&mut grads, *x, g);
                }
                Kind::AddConst(x) => acc(&mut grads, *x, g),
                Kind::Scale(x, k) => {
                    let mut g = g;
                    g.scale(*k);
                    acc(&mut grads, *x, g);
                }
                Kind::MulConst(x, c) => {
                    let mut g = g;
                    for (a, b) in g.data_mut().iter_mut().zip(c.data()) {
                        *a *= b;
                    }
                    acc(&mut grads, *x, g);
                }
                Kind::Gelu(x) => {
                    let vx = self.value(*x);
                    let mut g = g;
                    for (a, &x) in g.data_mut().iter_mut().zip(vx.data()) {
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        *a *= d;
                    }
                    acc(&mut grads, *x, g);
                }
                Kind::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let (rows, cols) = g.shape();
                    let mut dgain = Mat::zeros(1, cols);
                    let mut dbias = Mat::zeros(1, cols);
                    let mut dx = Mat::zeros(rows, cols);
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            dgain.data_mut()[c] += gr[c] * xr[c];
                            dbias.data_mut()[c] += gr[c];
                            dxhat[c] = gr[c] * gv.data()[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xr[c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let is = inv_std[r];
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = is * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *bias, dbias);
                    acc(&mut grads, *x, dx);
                }
                Kind::Softmax(x) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let mut dx = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dot: f64 = dx.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
                            *d = yv * (*d - dot);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Kind::ColSlice { x, start } => {
                    let vx = self.value(*x);
                    let mut dx = Mat::zeros(vx.rows(), vx.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, dx);
                }
                Kind::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut dp = Mat::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        off += cols;
                        acc(&mut grads, p, dp);
                    }
                }
                Kind::Gather { table, rows } => {
                    let t = self.value(*table);
                    let mut dt = Mat::zeros(t.rows(), t.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, v) in dt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Kind::WeightedRowSum { x, weights } => {
                    let vx = self.value(*x);
                    let mut dx = Mat::zeros(vx.rows(), vx.cols());
                    for (r, &w) in weights.iter().enumerate() {
                        for (o, v) in dx.row_mut(r).iter_mut().zip(g.data()) {
                            *o = w * v;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Kind::ReplaceRows { x, row, mask } => {
                    let mut dx = g;
                    let mut drow = Mat::zeros(1, dx.cols());
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for (o, v) in drow.data_mut().iter_mut().zip(dx.row(r)) {
                                *o += v;
                            }
                            dx.row_mut(r).fill(0.0);
                        }
                    }
                    acc(&mut grads, *row, drow);
                    acc(&mut grads, *x, dx);
                }
                Kind::Loss { x, grad } => {
                    let mut d = grad.clone();
                    d.scale(g.data()[0]);
                    acc(&mut grads, *x, d);
                }
                Kind::Combine(terms) => {
                    // Zero-weight terms stay out of the backward pass entirely.
                    for &(t, w) in terms.iter().filter(|(_, w)| *w != 0.0) {
                        acc(&mut grads, t, Mat::filled(1, 1, w * g.data()[0]));
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
