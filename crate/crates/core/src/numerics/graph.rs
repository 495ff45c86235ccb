//! Recorded-op reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only, records every op of one
//! forward pass, and [`Graph::backward`] walks the record in reverse to
//! produce [`Grads`]. Graphs are cheap, single-use, and single-threaded.

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    MatMulT {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
        broadcast: bool,
    },
    Relu(NodeId),
    Gelu(NodeId),
    Exp(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        qkv: NodeId,
        heads: usize,
        segments: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    SelectRows {
        a: NodeId,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    RowDot {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        s: NodeId,
    },
    Shift {
        a: NodeId,
        s: NodeId,
    },
    SquaredError {
        pred: NodeId,
        target: Vec<f64>,
        weight: f64,
    },
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    requires_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `c[m,n] = beta*c + a[m,k] * b[k,n]` with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices covering the full strided extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
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

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>, requires_grad: bool) -> NodeId {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        match self.nodes[id.0].op {
            Op::Param(pid) => self.store.get(pid).data(),
            _ => &self.nodes[id.0].value,
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[0]
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let (r, c) = self.shape(id);
        Tensor::matrix(r, c, self.value(id).to_vec()).expect("node shape is consistent")
    }

    /// Constant input; gradients never flow into it.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeId> {
        if data.len() != rows * cols {
            return Err(Error::shape("input", format!("{rows}x{cols} vs {} values", data.len())));
        }
        Ok(self.push(Op::Input, rows, cols, data, false))
    }

    pub fn input_tensor(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Input, t.rows(), t.cols(), t.data().to_vec(), false)
    }

    /// Leaf node for a stored parameter, memoized per graph.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let t = self.store.get(id);
        let n = self.push(Op::Param(id), t.rows(), t.cols(), Vec::new(), true);
        self.param_nodes[id.0] = Some(n);
        n
    }

    /// `y = x Wᵀ + b`, with `W` stored `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (r, k) = self.shape(x);
        let (n, wk) = self.shape(w);
        if k != wk {
            return Err(Error::shape("linear", format!("x is {r}x{k}, W is {n}x{wk}")));
        }
        if let Some(b) = b {
            let (br, bc) = self.shape(b);
            if br * bc != n {
                return Err(Error::shape("linear", format!("bias has {} values, need {n}", br * bc)));
            }
        }
        let mut out = vec![0.0; r * n];
        gemm(r, k, n, self.value(x), (k, 1), self.value(w), (1, k), 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bv).for_each(|(o, bb)| *o += bb);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Op::Linear { x, w, b }, r, n, out, rg))
    }

    /// `a bᵀ` for `a: [r, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, k) = self.shape(a);
        let (n, bk) = self.shape(b);
        if k != bk {
            return Err(Error::shape("matmul_t", format!("{r}x{k} vs {n}x{bk}")));
        }
        let mut out = vec![0.0; r * n];
        gemm(r, k, n, self.value(a), (k, 1), self.value(b), (1, k), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMulT { a, b }, r, n, out, rg))
    }

    /// Elementwise sum; `b` may be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        let broadcast = if (ra, ca) == (rb, cb) {
            false
        } else if rb == 1 && cb == ca {
            true
        } else {
            return Err(Error::shape("add", format!("{ra}x{ca} vs {rb}x{cb}")));
        };
        let av = self.value(a);
        let bv = self.value(b);
        let out: Vec<f64> = if broadcast {
            av.chunks(ca)
                .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
                .collect()
        } else {
            av.iter().zip(bv).map(|(x, y)| x + y).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add { a, b, broadcast }, ra, ca, out, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|v| v.max(0.0)).collect();
        let rg = self.rg(a);
        self.push(Op::Relu(a), r, c, out, rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(a);
        self.push(Op::Gelu(a), r, c, out, rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|v| v.exp()).collect();
        let rg = self.rg(a);
        self.push(Op::Exp(a), r, c, out, rg)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        let (gr, gc) = self.shape(gain);
        let (br, bc) = self.shape(bias);
        if gr * gc != c || br * bc != c {
            return Err(Error::shape(
                "layer_norm",
                format!("width {c}, gain {}, bias {}", gr * gc, br * bc),
            ));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut out = vec![0.0; r * c];
        let mut mean = vec![0.0; r];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            mean[i] = mu;
            rstd[i] = rs;
            for j in 0..c {
                out[i * c + j] = (row[j] - mu) * rs * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            r,
            c,
            out,
            rg,
        ))
    }

    /// Multi-head causal self-attention over packed `[Q | K | V]` rows.
    ///
    /// `segments` partitions the rows into independent sequences given as
    /// `(start, len)`; a row attends only to rows of its own segment at or
    /// before its own position.
    pub fn causal_attention(&mut self, qkv: NodeId, heads: usize, segments: Vec<(usize, usize)>) -> Result<NodeId> {
        let (t, c3) = self.shape(qkv);
        if c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 {
            return Err(Error::shape(
                "causal_attention",
                format!("width {c3} not 3*d with d divisible by {heads} heads"),
            ));
        }
        let mut next = 0;
        for &(start, len) in &segments {
            if start != next {
                return Err(Error::shape("causal_attention", "segments must tile the rows in order"));
            }
            next += len;
        }
        if next != t {
            return Err(Error::shape(
                "causal_attention",
                format!("segments cover {next} of {t} rows"),
            ));
        }
        let d = c3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(qkv);
        let probs_len: usize = segments.iter().map(|&(_, l)| heads * l * l).sum();
        let mut probs = vec![0.0; probs_len];
        let mut out = vec![0.0; t * d];
        let mut off = 0;
        for &(start, len) in &segments {
            for h in 0..heads {
                let p = &mut probs[off..off + len * len];
                for i in 0..len {
                    let qi = &qv[(start + i) * c3 + h * dh..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &qv[(start + j) * c3 + d + h * dh..][..dh];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        p[i * len + j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for j in 0..=i {
                        let e = (p[i * len + j] - max).exp();
                        p[i * len + j] = e;
                        z += e;
                    }
                    let o = &mut out[(start + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        p[i * len + j] /= z;
                        let w = p[i * len + j];
                        let vj = &qv[(start + j) * c3 + 2 * d + h * dh..][..dh];
                        o.iter_mut().zip(vj).for_each(|(o, v)| *o += w * v);
                    }
                }
                off += len * len;
            }
        }
        let rg = self.rg(qkv);
        Ok(self.push(
            Op::Attention {
                qkv,
                heads,
                segments,
                probs,
            },
            t,
            d,
            out,
            rg,
        ))
    }

    /// Rows of `a` picked by `idx` (repeats allowed); embedding lookup when
    /// `a` is a table parameter.
    pub fn select_rows(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::IndexOutOfRange { index: bad, len: r });
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let n = idx.len();
        let rg = self.rg(a);
        Ok(self.push(Op::SelectRows { a, idx }, n, c, out, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat_cols"));
        };
        let r = self.shape(first).0;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), r, total, out, rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat_rows"));
        };
        let c = self.shape(first).1;
        if parts.iter().any(|&p| self.shape(p).1 != c) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p));
            rows += self.shape(p).0;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), rows, c, out, rg))
    }

    /// Row-wise dot product: `[r, c] x [r, c] -> [r, 1]`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a);
        if self.shape(b) != (ra, ca) {
            return Err(Error::shape(
                "row_dot",
                format!("{:?} vs {:?}", (ra, ca), self.shape(b)),
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let out = av
            .chunks(ca.max(1))
            .zip(bv.chunks(ca.max(1)))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::RowDot { a, b }, ra, 1, out, rg))
    }

    /// Multiplies every element of `a` by the single value in `s`.
    pub fn scale(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale", "scale factor must be a single value"));
        }
        let (r, c) = self.shape(a);
        let sv = self.value(s)[0];
        let out = self.value(a).iter().map(|v| v * sv).collect();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(Op::Scale { a, s }, r, c, out, rg))
    }

    /// Adds the single value in `s` to every element of `a`.
    pub fn shift(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("shift", "shift must be a single value"));
        }
        let (r, c) = self.shape(a);
        let sv = self.value(s)[0];
        let out = self.value(a).iter().map(|v| v + sv).collect();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(Op::Shift { a, s }, r, c, out, rg))
    }

    /// `weight * Σ (pred - target)²` as a 1x1 node.
    pub fn squared_error(&mut self, pred: NodeId, target: Vec<f64>, weight: f64) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(Error::shape(
                "squared_error",
                format!("{} vs {}", pv.len(), target.len()),
            ));
        }
        let s: f64 = pv.iter().zip(&target).map(|(p, t)| (p - t) * (p - t)).sum();
        let rg = self.rg(pred);
        Ok(self.push(Op::SquaredError { pred, target, weight }, 1, 1, vec![weight * s], rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), 1, 1, vec![s], rg)
    }

    /// Reverse pass from a single-valued `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be a single value"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Grads::new(self.store.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut Vec<f64>> {
        let n = &self.nodes[id.0];
        if !n.requires_grad {
            return None;
        }
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; n.rows * n.cols]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Grads) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Input => {}
            Op::Param(pid) => out.accumulate(*pid, g.len(), g),
            Op::Linear { x, w, b } => {
                let (_, k) = self.shape(*x);
                let n = cols;
                if let Some(dx) = self.buf(grads, *x) {
                    gemm(rows, n, k, g, (n, 1), self.value(*w), (k, 1), 1.0, dx);
                }
                let xv = self.value(*x);
                if let Some(dw) = self.buf(grads, *w) {
                    gemm(n, rows, k, g, (1, n), xv, (k, 1), 1.0, dw);
                }
                if let Some(b) = b {
                    if let Some(db) = self.buf(grads, *b) {
                        for row in g.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
            Op::MatMulT { a, b } => {
                let (_, k) = self.shape(*a);
                let n = cols;
                let bv = self.value(*b);
                let av = self.value(*a);
                if let Some(da) = self.buf(grads, *a) {
                    gemm(rows, n, k, g, (n, 1), bv, (k, 1), 1.0, da);
                }
                if let Some(db) = self.buf(grads, *b) {
                    gemm(n, rows, k, g, (1, n), av, (k, 1), 1.0, db);
                }
            }
            Op::Add { a, b, broadcast } => {
                if let Some(da) = self.buf(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(db) = self.buf(grads, *b) {
                    if *broadcast {
                        for row in g.chunks(cols) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    } else {
                        db.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                if let Some(da) = self.buf(grads, *a) {
                    for ((d, v), x) in da.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *d += v;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                if let Some(da) = self.buf(grads, *a) {
                    for ((d, v), x) in da.iter_mut().zip(g).zip(av) {
                        *d += v * gelu_grad(*x);
                    }
                }
            }
            Op::Exp(a) => {
                let y = &node.value;
                if let Some(da) = self.buf(grads, *a) {
                    for ((d, v), y) in da.iter_mut().zip(g).zip(y) {
                        *d += v * y;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let c = cols;
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx_all = self.nodes[x.0].requires_grad.then(|| vec![0.0; rows * c]);
                for i in 0..rows {
                    let gi = &g[i * c..(i + 1) * c];
                    for j in 0..c {
                        xhat[j] = (xv[i * c + j] - mean[i]) * rstd[i];
                        dxhat[j] = gi[j] * gv[j];
                        dgain[j] += gi[j] * xhat[j];
                        dbias[j] += gi[j];
                    }
                    if let Some(dx) = dx_all.as_mut() {
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = rstd[i] * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if let (Some(dx), Some(buf)) = (dx_all, self.buf(grads, *x)) {
                    buf.iter_mut().zip(&dx).for_each(|(d, v)| *d += v);
                }
                if let Some(buf) = self.buf(grads, *gain) {
                    buf.iter_mut().zip(&dgain).for_each(|(d, v)| *d += v);
                }
                if let Some(buf) = self.buf(grads, *bias) {
                    buf.iter_mut().zip(&dbias).for_each(|(d, v)| *d += v);
                }
            }
            Op::Attention {
                qkv,
                heads,
                segments,
                probs,
            } => {
                let d = cols;
                let c3 = 3 * d;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qv = self.value(*qkv);
                let Some(dq) = self.buf(grads, *qkv) else { return };
                let mut dp = Vec::new();
                let mut off = 0;
                for &(start, len) in segments {
                    for h in 0..*heads {
                        let p = &probs[off..off + len * len];
                        for i in 0..len {
                            let go = &g[(start + i) * d + h * dh..][..dh];
                            dp.clear();
                            let mut acc = 0.0;
                            for j in 0..=i {
                                let vj = &qv[(start + j) * c3 + 2 * d + h * dh..][..dh];
                                let dpij = go.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                                dp.push(dpij);
                                acc += p[i * len + j] * dpij;
                                let pij = p[i * len + j];
                                let dvj = &mut dq[(start + j) * c3 + 2 * d + h * dh..][..dh];
                                dvj.iter_mut().zip(go).for_each(|(dv, o)| *dv += pij * o);
                            }
                            for j in 0..=i {
                                let ds = p[i * len + j] * (dp[j] - acc) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let row_i = (start + i) * c3 + h * dh;
                                let row_j = (start + j) * c3 + d + h * dh;
                                for e in 0..dh {
                                    dq[row_i + e] += ds * qv[row_j + e];
                                }
                                for e in 0..dh {
                                    dq[row_j + e] += ds * qv[row_i + e];
                                }
                            }
                        }
                        off += len * len;
                    }
                }
            }
            Op::SelectRows { a, idx } => {
                let c = cols;
                if let Some(da) = self.buf(grads, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g[r * c..(r + 1) * c];
                        da[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if let Some(dp) = self.buf(grads, p) {
                        for i in 0..rows {
                            let src = &g[i * cols + col..i * cols + col + pc];
                            dp[i * pc..(i + 1) * pc].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    }
                    col += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.shape(p).0 * cols;
                    if let Some(dp) = self.buf(grads, p) {
                        dp.iter_mut().zip(&g[off..off + n]).for_each(|(d, v)| *d += v);
                    }
                    off += n;
                }
            }
            Op::RowDot { a, b } => {
                let (_, c) = self.shape(*a);
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(da) = self.buf(grads, *a) {
                    for i in 0..rows {
                        for j in 0..c {
                            da[i * c + j] += g[i] * bv[i * c + j];
                        }
                    }
                }
                if let Some(db) = self.buf(grads, *b) {
                    for i in 0..rows {
                        for j in 0..c {
                            db[i * c + j] += g[i] * av[i * c + j];
                        }
                    }
                }
            }
            Op::Scale { a, s } => {
                let sv = self.value(*s)[0];
                let av = self.value(*a);
                if let Some(da) = self.buf(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, v)| *d += v * sv);
                }
                if let Some(ds) = self.buf(grads, *s) {
                    ds[0] += g.iter().zip(av).map(|(v, x)| v * x).sum::<f64>();
                }
            }
            Op::Shift { a, s } => {
                if let Some(da) = self.buf(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(ds) = self.buf(grads, *s) {
                    ds[0] += g.iter().sum::<f64>();
                }
            }
            Op::SquaredError { pred, target, weight } => {
                let pv = self.value(*pred);
                if let Some(dp) = self.buf(grads, *pred) {
                    for ((d, p), t) in dp.iter_mut().zip(pv).zip(target) {
                        *d += g[0] * 2.0 * weight * (p - t);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.buf(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}
