//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and enough saved state to run its backward rule. Calling
//! [`Graph::backward`] walks the tape in reverse and returns [`Gradients`] for
//! every node that transitively depends on a leaf created with
//! [`Graph::param`]. Constants never accumulate gradient, which is how the
//! frozen encoder stays frozen: its weights enter the tape as constants.
//!
//! The op set is small and partly fused (linear layers, layer norm, multi-head
//! attention) to keep tape memory proportional to activations rather than to
//! every scalar intermediate.

use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    SliceRows { src: Var, start: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    Gelu(Var),
    Attention { qkv: Var, heads: usize, probs: Vec<Matrix> },
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    SqDist(Var, Var),
    Exp(Var),
    Abs(Var),
    Sum(Var),
    SumRows(Var),
    DivScalar(Var, Var),
    Select { src: Var, idx: Vec<(usize, usize)> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when `v` does not influence the output or is a constant.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn leaf(&mut self, m: Matrix, trainable: bool) -> Var {
        self.push(m, Op::Leaf, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    /// `x · w + b` with `b` a `1 × out` row broadcast over rows of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut v = self.value(x).matmul(self.value(w));
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), (1, v.cols()), "bias shape mismatch");
            for r in 0..v.rows() {
                for (o, &bb) in v.row_mut(r).iter_mut().zip(bias.data()) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].requires_grad);
        self.push(v, Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&mats);
        let rg = self.rg(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Var {
        let v = self.value(src).slice_rows(start, len);
        let rg = self.rg(&[src]);
        self.push(v, Op::SliceRows { src, start }, rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        assert_eq!(g.shape(), (1, cols));
        assert_eq!(b.shape(), (1, cols));
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let rg = self.rg(&[x]);
        self.push(v, Op::Gelu(x), rg)
    }

    /// Multi-head scaled dot-product self-attention over a packed
    /// `seq × 3w` matrix holding `[Q | K | V]`; returns `seq × w`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let m = self.value(qkv);
        let (seq, w3) = m.shape();
        assert_eq!(w3 % (3 * heads), 0, "packed qkv width must split into heads");
        let width = w3 / 3;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(seq, width);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, width + h * dh, 2 * width + h * dh);
            let mut p = Matrix::zeros(seq, seq);
            for i in 0..seq {
                let qi = &m.row(i)[qo..qo + dh];
                let mut maxv = f64::NEG_INFINITY;
                for j in 0..seq {
                    let s = dot(qi, &m.row(j)[ko..ko + dh]) * scale;
                    p.set(i, j, s);
                    maxv = maxv.max(s);
                }
                let row = p.row_mut(i);
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - maxv).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
            }
            for i in 0..seq {
                for j in 0..seq {
                    let pij = p.get(i, j);
                    let vj = &m.row(j)[vo..vo + dh];
                    let orow = &mut out.row_mut(i)[h * dh..(h + 1) * dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
            probs.push(p);
        }
        let rg = self.rg(&[qkv]);
        self.push(out, Op::Attention { qkv, heads, probs }, rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let maxv = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = maxv + row.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmaxRows(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Scales every row to unit L2 norm; fails on a zero row.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = crate::tensor::norm(xv.row(r));
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Numeric(format!("row {r} has norm {n}; cosine similarity is undefined")));
            }
            norms.push(n);
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Pairwise squared Euclidean distances between rows: `n × m`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "sq_dist width mismatch");
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        for i in 0..av.rows() {
            for j in 0..bv.rows() {
                let d: f64 = av.row(i).iter().zip(bv.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                out.set(i, j, d);
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::SqDist(a, b), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        let rg = self.rg(&[x]);
        self.push(v, Op::Exp(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        let rg = self.rg(&[x]);
        self.push(v, Op::Abs(x), rg)
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Matrix::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    /// Row sums: `n × c` to `n × 1`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Matrix::from_vec(xv.rows(), 1, (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect());
        let rg = self.rg(&[x]);
        self.push(v, Op::SumRows(x), rg)
    }

    /// `a / s` where `s` is a `1 × 1` node.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(a).map(|x| x / sv);
        let rg = self.rg(&[a, s]);
        self.push(v, Op::DivScalar(a, s), rg)
    }

    /// Gathers the listed entries into a `1 × idx.len()` row.
    pub fn select(&mut self, src: Var, idx: Vec<(usize, usize)>) -> Var {
        let sv = self.value(src);
        let v = Matrix::row_vector(idx.iter().map(|&(r, c)| sv.get(r, c)).collect());
        let rg = self.rg(&[src]);
        self.push(v, Op::Select { src, idx }, rg)
    }

    /// Adds scalar nodes; `parts` may be empty (yields a zero constant).
    pub fn add_all(&mut self, parts: &[Var]) -> Var {
        let mut iter = parts.iter().copied();
        match iter.next() {
            None => self.constant(Matrix::scalar(0.0)),
            Some(first) => iter.fold(first, |acc, p| self.add(acc, p)),
        }
    }

    /// Gradients of the `1 × 1` node `output` w.r.t. every trainable ancestor.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward requires a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(Matrix::scalar(1.0));
        }
        for idx in (0..=output.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, gout: &Matrix, grads: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, g: Matrix| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(*a, gout.matmul_t(self.value(*b)));
                }
                if wants(*b) {
                    acc(*b, self.value(*a).t_matmul(gout));
                }
            }
            Op::MatMulT(a, b) => {
                if wants(*a) {
                    acc(*a, gout.matmul(self.value(*b)));
                }
                if wants(*b) {
                    acc(*b, gout.t_matmul(self.value(*a)));
                }
            }
            Op::Linear { x, w, b } => {
                if wants(*x) {
                    acc(*x, gout.matmul_t(self.value(*w)));
                }
                if wants(*w) {
                    acc(*w, self.value(*x).t_matmul(gout));
                }
                if let Some(b) = b {
                    if wants(*b) {
                        acc(*b, column_sums(gout));
                    }
                }
            }
            Op::Add(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, gout.zip_map(self.value(*b), |g, y| g * y));
                }
                if wants(*b) {
                    acc(*b, gout.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::Scale(a, s) => acc(*a, gout.map(|g| g * s)),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if wants(*p) {
                        acc(*p, gout.slice_rows(start, rows));
                    }
                    start += rows;
                }
            }
            Op::SliceRows { src, start } => {
                if wants(*src) {
                    let sv = self.value(*src);
                    let mut g = Matrix::zeros(sv.rows(), sv.cols());
                    let cols = sv.cols();
                    g.data_mut()[start * cols..start * cols + gout.len()].copy_from_slice(gout.data());
                    acc(*src, g);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = self.value(*gamma);
                let (rows, cols) = xhat.shape();
                if wants(*gamma) {
                    acc(*gamma, column_sums(&gout.zip_map(xhat, |g, h| g * h)));
                }
                if wants(*beta) {
                    acc(*beta, column_sums(gout));
                }
                if wants(*x) {
                    let mut gx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let dxh: Vec<f64> = (0..cols).map(|c| gout.get(r, c) * gv.data()[c]).collect();
                        let mean_d = dxh.iter().sum::<f64>() / n;
                        let mean_dh = dxh.iter().zip(xhat.row(r)).map(|(d, h)| d * h).sum::<f64>() / n;
                        for c in 0..cols {
                            let h = xhat.get(r, c);
                            gx.set(r, c, inv_std[r] * (dxh[c] - mean_d - h * mean_dh));
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::Gelu(x) => {
                let g = gout.zip_map(self.value(*x), |g, x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                });
                acc(*x, g);
            }
            Op::Attention { qkv, heads, probs } => {
                if !wants(*qkv) {
                    return;
                }
                let m = self.value(*qkv);
                let (seq, w3) = m.shape();
                let width = w3 / 3;
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut g = Matrix::zeros(seq, w3);
                for (h, p) in probs.iter().enumerate() {
                    let (qo, ko, vo, oo) = (h * dh, width + h * dh, 2 * width + h * dh, h * dh);
                    // dV = Pᵀ dO ; dP = dO Vᵀ
                    let mut dp = Matrix::zeros(seq, seq);
                    for i in 0..seq {
                        let go = &gout.row(i)[oo..oo + dh];
                        for j in 0..seq {
                            let vj = &m.row(j)[vo..vo + dh];
                            dp.set(i, j, dot(go, vj));
                            let pij = p.get(i, j);
                            let gv = &mut g.row_mut(j)[vo..vo + dh];
                            for (gg, &o) in gv.iter_mut().zip(go) {
                                *gg += pij * o;
                            }
                        }
                    }
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                    for i in 0..seq {
                        let s: f64 = (0..seq).map(|j| dp.get(i, j) * p.get(i, j)).sum();
                        for j in 0..seq {
                            let ds = p.get(i, j) * (dp.get(i, j) - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                let kj = m.get(j, ko + c);
                                let qi = m.get(i, qo + c);
                                let gq = g.get(i, qo + c) + ds * kj;
                                g.set(i, qo + c, gq);
                                let gk = g.get(j, ko + c) + ds * qi;
                                g.set(j, ko + c, gk);
                            }
                        }
                    }
                }
                acc(*qkv, g);
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let mut g = gout.clone();
                for r in 0..g.rows() {
                    let s: f64 = gout.row(r).iter().sum();
                    for (gg, &yy) in g.row_mut(r).iter_mut().zip(y.row(r)) {
                        *gg -= yy.exp() * s;
                    }
                }
                acc(*x, g);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s = dot(gout.row(r), y.row(r));
                    for c in 0..y.cols() {
                        g.set(r, c, y.get(r, c) * (gout.get(r, c) - s));
                    }
                }
                acc(*x, g);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s = dot(gout.row(r), y.row(r));
                    for c in 0..y.cols() {
                        g.set(r, c, (gout.get(r, c) - y.get(r, c) * s) / norms[r]);
                    }
                }
                acc(*x, g);
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                for i in 0..av.rows() {
                    for j in 0..bv.rows() {
                        let gij = 2.0 * gout.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..av.cols() {
                            let d = gij * (av.get(i, c) - bv.get(j, c));
                            ga.data_mut()[i * av.cols() + c] += d;
                            gb.data_mut()[j * bv.cols() + c] -= d;
                        }
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Exp(x) => acc(*x, gout.zip_map(&node.value, |g, y| g * y)),
            Op::Abs(x) => acc(*x, gout.zip_map(self.value(*x), |g, v| g * sign(v))),
            Op::Sum(x) => {
                let xv = self.value(*x);
                acc(*x, Matrix::filled(xv.rows(), xv.cols(), gout.data()[0]));
            }
            Op::SumRows(x) => {
                let xv = self.value(*x);
                let mut g = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    g.row_mut(r).fill(gout.get(r, 0));
                }
                acc(*x, g);
            }
            Op::DivScalar(a, s) => {
                let sv = self.scalar(*s);
                if wants(*a) {
                    acc(*a, gout.map(|g| g / sv));
                }
                if wants(*s) {
                    let num: f64 = gout.data().iter().zip(self.value(*a).data()).map(|(g, x)| g * x).sum();
                    acc(*s, Matrix::scalar(-num / (sv * sv)));
                }
            }
            Op::Select { src, idx } => {
                let sv = self.value(*src);
                let mut g = Matrix::zeros(sv.rows(), sv.cols());
                for (k, &(r, c)) in idx.iter().enumerate() {
                    let cur = g.get(r, c);
                    g.set(r, c, cur + gout.data()[k]);
                }
                acc(*src, g);
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

/// Numerically stable row-wise softmax of a plain matrix.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let maxv = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - maxv).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `build` w.r.t. every entry of every input.
    fn check(inputs: &[Matrix], build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let eps = 1e-5;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
            for e in 0..m.len() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, mm)| {
                            let mut mm = mm.clone();
                            if j == k {
                                mm.data_mut()[e] += delta;
                            }
                            g2.constant(mm)
                        })
                        .collect();
                    let o = build(&mut g2, &vs);
                    g2.scalar(o)
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data()[e];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} entry {e}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn rand(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::random_normal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn linear_and_layer_norm() {
        let x = rand(3, 4, 1);
        let w = rand(4, 5, 2);
        let b = rand(1, 5, 3);
        let gm = rand(1, 5, 4);
        let bt = rand(1, 5, 5);
        let probe = rand(3, 5, 6);
        check(&[x, w, b, gm, bt, probe], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]));
            let n = g.layer_norm(y, v[3], v[4], 1e-5);
            let m = g.mul(n, v[5]);
            g.sum(m)
        });
    }

    #[test]
    fn attention_and_gelu() {
        let x = rand(4, 12, 7).map(|v| v * 0.5);
        let probe = rand(4, 4, 8);
        check(&[x, probe], |g, v| {
            let a = g.attention(v[0], 2);
            let h = g.gelu(a);
            let m = g.mul(h, v[1]);
            g.sum(m)
        });
    }

    #[test]
    fn normalize_softmax_and_logsoftmax() {
        let a = rand(3, 4, 9);
        let b = rand(2, 4, 10);
        let probe = rand(3, 2, 11);
        check(&[a, b, probe], |g, v| {
            let an = g.l2_normalize_rows(v[0]).unwrap();
            let bn = g.l2_normalize_rows(v[1]).unwrap();
            let c = g.matmul_t(an, bn);
            let c = g.scale(c, 3.0);
            let ls = g.log_softmax_rows(c);
            let sm = g.softmax_rows(c);
            let s = g.add(ls, sm);
            let m = g.mul(s, v[2]);
            g.sum(m)
        });
    }

    #[test]
    fn kernel_pieces() {
        let a = rand(3, 2, 12);
        let b = rand(4, 2, 13);
        check(&[a, b], |g, v| {
            let d = g.sq_dist(v[0], v[1]);
            let sel = g.select(d, vec![(0, 1), (2, 3)]);
            let sig = g.sum(sel);
            let q = g.div_scalar(d, sig);
            let q = g.scale(q, -0.5);
            let e = g.exp(q);
            let rs = g.sum_rows(e);
            let ab = g.abs(rs);
            let cat = g.concat_rows(&[ab, rs]);
            let sl = g.slice_rows(cat, 1, 4);
            let p = g.matmul_t(sl, sl);
            let w = g.matmul_t(v[1], v[1]);
            let p = g.sub(p, w);
            g.sum(p)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Matrix::filled(2, 2, 1.0));
        let p = g.param(Matrix::filled(2, 2, 2.0));
        let m = g.mul(c, p);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn zero_row_is_a_numeric_error() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
        let err = g.l2_normalize_rows(x).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }
}
