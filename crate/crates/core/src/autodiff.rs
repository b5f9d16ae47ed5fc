//! Tape-based reverse-mode differentiation over [`DenseTensor`] values.
//!
//! Every forward call appends a node holding its value and the operation that
//! produced it. `backward` walks the nodes in reverse insertion order, which is
//! a valid reverse topological order because a node can only reference nodes
//! that already exist. All accumulation happens in `f64` in a fixed order, so
//! replaying the same program yields bit-identical gradients.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::sparse::KernelMap;
use crate::tensor::DenseTensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Silu,
    Softplus,
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Axis along which the smaller operand of a broadcast op is repeated.
///
/// `Leading`: `y` has the shape of `x` without its first axis (per-channel bias).
/// `Trailing`: `y` has the shape of `x` without its last axis (per-row scale).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Leading,
    Trailing,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Broadcast(Binary, Var, Var, Broadcast),
    Scale(Var, f64),
    Unary(Unary, Var),
    Reduce {
        x: Var,
        kind: ReduceKind,
        axis: usize,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    GatherRows(Var, Arc<[usize]>),
    ConcatRows(Vec<Var>),
    SegmentMean(Var, Arc<[usize]>),
    SegmentScale(Var, Var, Arc<[usize]>),
    ScatterMean {
        x: Var,
        parent: Arc<[usize]>,
        counts: Vec<usize>,
    },
    SparseConv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        km: Arc<KernelMap>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    FrozenNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    DepthwiseConv1d {
        x: Var,
        w: Var,
        bias: Var,
    },
    SelectiveScan {
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        states: Vec<f64>,
    },
    LtiScan {
        x: Var,
        abar: Var,
        bbar: Var,
        c: Var,
        d: Var,
        h0: Vec<f64>,
        states: Vec<f64>,
    },
}

struct Node {
    value: DenseTensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics computed by a training-mode normalization.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> DenseTensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => DenseTensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => DenseTensor::zeros(shape),
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: Vec<(Var, ParamId)>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

pub(crate) fn erf(x: f64) -> f64 {
    libm::erf(x)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn unary_forward(op: Unary, x: f64) -> f64 {
    match op {
        Unary::Relu => x.max(0.0),
        Unary::Gelu => gelu(x),
        Unary::Sigmoid => sigmoid(x),
        Unary::Silu => x * sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Exp => x.exp(),
    }
}

/// Derivative given the input `x` and output `y`.
fn unary_grad(op: Unary, x: f64, y: f64) -> f64 {
    match op {
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Gelu => gelu_grad(x),
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Softplus => sigmoid(x),
        Unary::Exp => y,
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
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

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: DenseTensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_data(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, rg: bool) -> Var {
        let value = DenseTensor::new(shape, data).expect("op produced consistent shape");
        self.push(value, op, rg)
    }

    /// Records a leaf; it participates in differentiation iff `requires_grad` is set.
    pub fn leaf(&mut self, t: DenseTensor) -> Var {
        let rg = t.requires_grad;
        let value = DenseTensor::new(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: DenseTensor) -> Var {
        let value = DenseTensor::new(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        self.push(value, Op::Leaf, false)
    }

    /// Records a parameter from `store`; its gradient can later be written back.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let value = DenseTensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        let v = self.push(value, Op::Leaf, t.requires_grad);
        if t.requires_grad {
            self.param_leaves.push((v, id));
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (sa, sb) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        if k != k2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let c = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_data(vec![m, n], c, Op::MatMul(a, b), rg))
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("elementwise", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<f64> = match op {
            Binary::Add => da.iter().zip(db).map(|(x, y)| x + y).collect(),
            Binary::Sub => da.iter().zip(db).map(|(x, y)| x - y).collect(),
            Binary::Mul => da.iter().zip(db).map(|(x, y)| x * y).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push_data(shape, out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `x op y` with `y` repeated along one declared axis of `x`.
    pub fn broadcast(&mut self, op: Binary, x: Var, y: Var, axis: Broadcast) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sy = self.shape(y).to_vec();
        let ok = !sx.is_empty()
            && match axis {
                Broadcast::Leading => sy.as_slice() == &sx[1..],
                Broadcast::Trailing => sy.as_slice() == &sx[..sx.len() - 1],
            };
        if !ok || op == Binary::Sub {
            return Err(shape_err("broadcast", &sx, &sy));
        }
        let (dx, dy) = (self.data(x), self.data(y));
        let ylen = dy.len().max(1);
        let inner = match axis {
            Broadcast::Leading => 1,
            Broadcast::Trailing => sx[sx.len() - 1],
        };
        let chunk = match axis {
            Broadcast::Leading => ylen,
            Broadcast::Trailing => inner.max(1),
        };
        let mut out = Vec::with_capacity(dx.len());
        for (ci, xs) in dx.chunks(chunk).enumerate() {
            for (k, v) in xs.iter().enumerate() {
                let j = match axis {
                    Broadcast::Leading => k,
                    Broadcast::Trailing => ci,
                };
                out.push(match op {
                    Binary::Add => v + dy[j],
                    _ => v * dy[j],
                });
            }
        }
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push_data(sx, out, Op::Broadcast(op, x, y, axis), rg))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.broadcast(Binary::Add, x, bias, Broadcast::Leading)
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * alpha).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push_data(shape, out, Op::Scale(x, alpha), rg)
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| unary_forward(op, *v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push_data(shape, out, Op::Unary(op, x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    /// Reduces `axis` away. An empty extent is a domain error.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for shape {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        if n == 0 {
            return Err(Error::Domain(format!("reduction over empty axis {axis} of {shape:?}")));
        }
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| d[(o * n + k) * inner + i];
                let slot = o * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut s = 0.0;
                        for k in 0..n {
                            s += at(k);
                        }
                        out[slot] = if kind == ReduceKind::Mean { s / n as f64 } else { s };
                    }
                    ReduceKind::Max => {
                        let mut best = 0;
                        for k in 1..n {
                            if at(k) > at(best) {
                                best = k;
                            }
                        }
                        out[slot] = at(best);
                        argmax[slot] = best;
                    }
                }
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push_data(oshape, out, Op::Reduce { x, kind, axis, argmax }, rg))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axis)
    }

    /// Mean over every element, as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, vec![n])?;
        self.mean(flat, 0)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(shape_err("reshape", self.shape(x), &shape));
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push_data(shape, data, Op::Reshape(x), rg))
    }

    /// Selects rows of a 2-D tensor (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: Arc<[usize]>) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if let Some(bad) = rows.iter().find(|r| **r >= n) {
            return Err(Error::Shape(format!("row {bad} out of range for {n} rows")));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for r in rows.iter() {
            out.extend_from_slice(&d[r * c..(r + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push_data(vec![rows.len(), c], out, Op::GatherRows(x, rows), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(p) => self.value(*p).dims2()?.1,
            None => return Err(Error::Contract("concat of zero tensors".into())),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for p in parts {
            let (r, c) = self.value(*p).dims2()?;
            if c != cols {
                return Err(shape_err("concat_rows", &[rows, cols], &[r, c]));
            }
            out.extend_from_slice(self.data(*p));
            rows += r;
            rg |= self.rg(*p);
        }
        Ok(self.push_data(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Per-segment row mean of `x[N, C]`; segment `s` is rows `offsets[s]..offsets[s+1]`.
    pub fn segment_mean(&mut self, x: Var, offsets: Arc<[usize]>) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        check_offsets(&offsets, n)?;
        let segs = offsets.len() - 1;
        let d = self.data(x);
        let mut out = vec![0.0; segs * c];
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if lo == hi {
                return Err(Error::Domain(format!("batch item {s} has no coordinates")));
            }
            let o = &mut out[s * c..(s + 1) * c];
            for r in lo..hi {
                for (acc, v) in o.iter_mut().zip(&d[r * c..(r + 1) * c]) {
                    *acc += v;
                }
            }
            let inv = (hi - lo) as f64;
            o.iter_mut().for_each(|v| *v /= inv);
        }
        let rg = self.rg(x);
        Ok(self.push_data(vec![segs, c], out, Op::SegmentMean(x, offsets), rg))
    }

    /// Scales every row of segment `s` of `x[N, C]` by `w[s, :]`.
    pub fn segment_scale(&mut self, x: Var, w: Var, offsets: Arc<[usize]>) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        let (ws, wc) = self.value(w).dims2()?;
        check_offsets(&offsets, n)?;
        if wc != c || ws != offsets.len() - 1 {
            return Err(shape_err("segment_scale", &[n, c], &[ws, wc]));
        }
        let (dx, dw) = (self.data(x), self.data(w));
        let mut out = vec![0.0; n * c];
        for s in 0..ws {
            for r in offsets[s]..offsets[s + 1] {
                for j in 0..c {
                    out[r * c + j] = dx[r * c + j] * dw[s * c + j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push_data(vec![n, c], out, Op::SegmentScale(x, w, offsets), rg))
    }

    /// Averages rows of `x` into `n_out` parent rows; parents without children get zeros.
    pub fn scatter_mean(&mut self, x: Var, parent: Arc<[usize]>, n_out: usize) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if parent.len() != n {
            return Err(Error::Shape(format!("{} parent indices for {n} rows", parent.len())));
        }
        let mut counts = vec![0usize; n_out];
        for p in parent.iter() {
            if *p >= n_out {
                return Err(Error::Shape(format!("parent row {p} out of range for {n_out}")));
            }
            counts[*p] += 1;
        }
        let d = self.data(x);
        let mut out = vec![0.0; n_out * c];
        for (r, p) in parent.iter().enumerate() {
            for j in 0..c {
                out[p * c + j] += d[r * c + j];
            }
        }
        for (p, cnt) in counts.iter().enumerate() {
            if *cnt > 0 {
                out[p * c..(p + 1) * c].iter_mut().for_each(|v| *v /= *cnt as f64);
            }
        }
        let rg = self.rg(x);
        Ok(self.push_data(vec![n_out, c], out, Op::ScatterMean { x, parent, counts }, rg))
    }

    /// Sparse convolution: `out[o] = Σ_{(i,o,k) ∈ km} x[i] · w[k] (+ bias)`.
    ///
    /// `x` is `[N_in, C_in]`, `w` is `[K³, C_in, C_out]`.
    pub fn sparse_conv(&mut self, x: Var, w: Var, bias: Option<Var>, km: Arc<KernelMap>) -> Result<Var> {
        let (n_in, cin) = self.value(x).dims2()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[0] != km.volume() || ws[1] != cin {
            return Err(shape_err("sparse_conv weights", &ws, &[km.volume(), cin]));
        }
        let cout = ws[2];
        if n_in != km.in_len {
            return Err(Error::Contract(format!(
                "kernel map built for {} input rows, features have {n_in}",
                km.in_len
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err("sparse_conv bias", self.shape(b), &[cout]));
            }
        }
        let n_out = km.out_len();
        let (dx, dw) = (self.data(x), self.data(w));
        let mut out = vec![0.0; n_out * cout];
        if let Some(b) = bias {
            let db = self.data(b);
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(db);
            }
        }
        for t in &km.triples {
            let xin = &dx[t.in_row as usize * cin..(t.in_row as usize + 1) * cin];
            let wk = &dw[t.offset as usize * cin * cout..(t.offset as usize + 1) * cin * cout];
            let o = &mut out[t.out_row as usize * cout..(t.out_row as usize + 1) * cout];
            for (ci, xv) in xin.iter().enumerate() {
                if *xv == 0.0 {
                    continue;
                }
                for (ov, wv) in o.iter_mut().zip(&wk[ci * cout..(ci + 1) * cout]) {
                    *ov += xv * wv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push_data(vec![n_out, cout], out, Op::SparseConv { x, w, bias, km }, rg))
    }

    /// Training-mode normalization: per-channel standardization over all rows,
    /// then `gamma * x_hat + beta`. Returns the batch statistics alongside.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, NormStats)> {
        let (n, c) = self.value(x).dims2()?;
        self.check_affine(gamma, beta, c)?;
        if n == 0 {
            return Err(Error::Domain("normalization over zero rows".into()));
        }
        let d = self.data(x);
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for j in 0..c {
                mean[j] += d[r * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for j in 0..c {
                let dv = d[r * c + j] - mean[j];
                var[j] += dv * dv;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            for j in 0..c {
                let h = (d[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push_data(
            vec![n, c],
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, NormStats { mean, var }))
    }

    /// Evaluation-mode normalization with frozen statistics: a fixed affine map.
    pub fn frozen_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        self.check_affine(gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("running statistics do not have {c} channels")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let d = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            for j in 0..c {
                let h = (d[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push_data(
            vec![n, c],
            out,
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("norm affine", self.shape(gamma), &[c]));
        }
        Ok(())
    }

    /// Causal depthwise convolution along the rows of `x[T, E]` with `w[E, K]`:
    /// `y[t, e] = bias[e] + Σ_j w[e, j] · x[t - (K-1) + j, e]`, zero-padded on the left.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (t_len, e) = self.value(x).dims2()?;
        let (we, k) = self.value(w).dims2()?;
        if we != e || self.shape(bias) != [e] {
            return Err(shape_err("depthwise_conv1d", &[t_len, e], &[we, k]));
        }
        let (dx, dw, db) = (self.data(x), self.data(w), self.data(bias));
        let mut out = vec![0.0; t_len * e];
        for t in 0..t_len {
            for ch in 0..e {
                let mut s = db[ch];
                for j in 0..k {
                    let src = t as isize - (k as isize - 1) + j as isize;
                    if src >= 0 {
                        s += dw[ch * k + j] * dx[src as usize * e + ch];
                    }
                }
                out[t * e + ch] = s;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(bias);
        Ok(self.push_data(vec![t_len, e], out, Op::DepthwiseConv1d { x, w, bias }, rg))
    }

    /// Selective scan with per-step parameters and zero initial state.
    ///
    /// Shapes: `u, delta: [T, E]`, `a: [E, N]`, `b, c: [T, N]`, `d: [E]`.
    /// `h_t = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t u_t`, `y_t = C_t · h_t + D ⊙ u_t`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let (t_len, e) = self.value(u).dims2()?;
        let (ae, n) = self.value(a).dims2()?;
        if self.shape(delta) != [t_len, e]
            || ae != e
            || self.shape(b) != [t_len, n]
            || self.shape(c) != [t_len, n]
            || self.shape(d) != [e]
        {
            return Err(Error::Shape(format!(
                "selective_scan: u {:?}, delta {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
                self.shape(u),
                self.shape(delta),
                self.shape(a),
                self.shape(b),
                self.shape(c),
                self.shape(d)
            )));
        }
        for (name, v) in [("A", a), ("D", d), ("delta", delta)] {
            if !self.value(v).is_finite() {
                return Err(Error::Numeric(format!("selective_scan: non-finite {name}")));
            }
        }
        let (du, dd, da, db, dc, dskip) = (
            self.data(u),
            self.data(delta),
            self.data(a),
            self.data(b),
            self.data(c),
            self.data(d),
        );
        // hidden states are only kept when a backward pass can need them
        let rg = [u, delta, a, b, c, d].iter().any(|v| self.rg(*v));
        let mut states = if rg { vec![0.0; t_len * e * n] } else { Vec::new() };
        let mut h = vec![0.0; e * n];
        let mut out = vec![0.0; t_len * e];
        for t in 0..t_len {
            let bt = &db[t * n..(t + 1) * n];
            let ct = &dc[t * n..(t + 1) * n];
            for ch in 0..e {
                let dt = dd[t * e + ch];
                let x = du[t * e + ch];
                let hs = &mut h[ch * n..(ch + 1) * n];
                let arow = &da[ch * n..(ch + 1) * n];
                let mut y = 0.0;
                for s in 0..n {
                    hs[s] = (dt * arow[s]).exp() * hs[s] + dt * bt[s] * x;
                    y += ct[s] * hs[s];
                }
                out[t * e + ch] = y + dskip[ch] * x;
            }
            if rg {
                states[t * e * n..(t + 1) * e * n].copy_from_slice(&h);
            }
        }
        Ok(self.push_data(
            vec![t_len, e],
            out,
            Op::SelectiveScan {
                u,
                delta,
                a,
                b,
                c,
                d,
                states,
            },
            rg,
        ))
    }

    /// Time-invariant diagonal scan: `h_t = Ā ⊙ h_{t-1} + B̄ x_t`, `y_t = C · h_t + D x_t`,
    /// evaluated per channel. Shapes: `x: [T, Ch]`, `abar, bbar, c, h0: [Ch, N]`, `d: [Ch]`.
    pub fn lti_scan(&mut self, x: Var, abar: Var, bbar: Var, c: Var, d: Var, h0: Option<&[f64]>) -> Result<Var> {
        let (t_len, ch) = self.value(x).dims2()?;
        let (ac, n) = self.value(abar).dims2()?;
        if ac != ch || self.shape(bbar) != [ch, n] || self.shape(c) != [ch, n] || self.shape(d) != [ch] {
            return Err(Error::Shape(format!(
                "lti_scan: x {:?}, Ā {:?}, B̄ {:?}, C {:?}, D {:?}",
                self.shape(x),
                self.shape(abar),
                self.shape(bbar),
                self.shape(c),
                self.shape(d)
            )));
        }
        for (name, v) in [("Ā", abar), ("B̄", bbar), ("C", c), ("D", d)] {
            if !self.value(v).is_finite() {
                return Err(Error::Numeric(format!("lti_scan: non-finite {name}")));
            }
        }
        let h0 = match h0 {
            Some(h) if h.len() == ch * n => h.to_vec(),
            Some(h) => return Err(Error::Shape(format!("h0 has {} values, expected {}", h.len(), ch * n))),
            None => vec![0.0; ch * n],
        };
        let (dx, da, db, dc, dd) = (self.data(x), self.data(abar), self.data(bbar), self.data(c), self.data(d));
        let mut h = h0.clone();
        let mut states = vec![0.0; t_len * ch * n];
        let mut out = vec![0.0; t_len * ch];
        for t in 0..t_len {
            for k in 0..ch {
                let xv = dx[t * ch + k];
                let mut y = 0.0;
                for s in 0..n {
                    let i = k * n + s;
                    h[i] = da[i] * h[i] + db[i] * xv;
                    y += dc[i] * h[i];
                }
                out[t * ch + k] = y + dd[k] * xv;
            }
            states[t * ch * n..(t + 1) * ch * n].copy_from_slice(&h);
        }
        let rg = [x, abar, bbar, c, d].iter().any(|v| self.rg(*v));
        Ok(self.push_data(
            vec![t_len, ch],
            out,
            Op::LtiScan {
                x,
                abar,
                bbar,
                c,
                d,
                h0,
                states,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Accumulates parameter gradients from `grads` into `store`.
    pub fn write_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (v, id) in &self.param_leaves {
            if let Some(g) = grads.get(*v) {
                store.get_mut(*id).accumulate_grad(g);
            }
        }
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.shape(*b)[1];
                if want(*a) {
                    // dA = dC · Bᵀ
                    let bd = self.data(*b);
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bd[p * n + j];
                        }
                    }
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let row = &mut da[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for (d, bv) in row.iter_mut().zip(&bt[j * k..(j + 1) * k]) {
                                *d += gv * bv;
                            }
                        }
                    }
                    add_into(&mut grads[a.0], &da);
                }
                if want(*b) {
                    // dB = Aᵀ · dC
                    let ad = self.data(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Binary(op, a, b) => {
                let (a, b) = (*a, *b);
                match op {
                    Binary::Add => {
                        if want(a) {
                            add_into(&mut grads[a.0], g);
                        }
                        if want(b) {
                            add_into(&mut grads[b.0], g);
                        }
                    }
                    Binary::Sub => {
                        if want(a) {
                            add_into(&mut grads[a.0], g);
                        }
                        if want(b) {
                            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                            add_into(&mut grads[b.0], &neg);
                        }
                    }
                    Binary::Mul => {
                        if want(a) {
                            let ga: Vec<f64> = g.iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
                            add_into(&mut grads[a.0], &ga);
                        }
                        if want(b) {
                            let gb: Vec<f64> = g.iter().zip(self.data(a)).map(|(x, y)| x * y).collect();
                            add_into(&mut grads[b.0], &gb);
                        }
                    }
                }
            }
            Op::Broadcast(op, x, y, axis) => {
                let (x, y) = (*x, *y);
                let sx = self.shape(x);
                let ylen = self.value(y).numel().max(1);
                let inner = *sx.last().unwrap();
                let chunk = match axis {
                    Broadcast::Leading => ylen,
                    Broadcast::Trailing => inner.max(1),
                };
                let (dx, dy) = (self.data(x), self.data(y));
                if want(x) {
                    let gx: Vec<f64> = match op {
                        Binary::Add => g.to_vec(),
                        _ => {
                            let mut gx = Vec::with_capacity(g.len());
                            for (ci, gs) in g.chunks(chunk).enumerate() {
                                for (k, gv) in gs.iter().enumerate() {
                                    let j = if *axis == Broadcast::Leading { k } else { ci };
                                    gx.push(gv * dy[j]);
                                }
                            }
                            gx
                        }
                    };
                    add_into(&mut grads[x.0], &gx);
                }
                if want(y) {
                    let mut gy = vec![0.0; self.value(y).numel()];
                    for (ci, gs) in g.chunks(chunk).enumerate() {
                        let base = ci * chunk;
                        for (k, gv) in gs.iter().enumerate() {
                            let j = if *axis == Broadcast::Leading { k } else { ci };
                            gy[j] += match op {
                                Binary::Add => *gv,
                                _ => gv * dx[base + k],
                            };
                        }
                    }
                    add_into(&mut grads[y.0], &gy);
                }
            }
            Op::Scale(x, alpha) => {
                if want(*x) {
                    let gx: Vec<f64> = g.iter().map(|v| v * alpha).collect();
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::Unary(op, x) => {
                if want(*x) {
                    let xd = self.data(*x);
                    let yd = node.value.data();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(xd.iter().zip(yd))
                        .map(|(gv, (xv, yv))| gv * unary_grad(*op, *xv, *yv))
                        .collect();
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::Reduce { x, kind, axis, argmax } => {
                if want(*x) {
                    let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                    let mut gx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        for i in 0..inner {
                            let gv = g[o * inner + i];
                            match kind {
                                ReduceKind::Sum | ReduceKind::Mean => {
                                    let v = if *kind == ReduceKind::Mean { gv / n as f64 } else { gv };
                                    for k in 0..n {
                                        gx[(o * n + k) * inner + i] = v;
                                    }
                                }
                                ReduceKind::Max => {
                                    gx[(o * n + argmax[o * inner + i]) * inner + i] = gv;
                                }
                            }
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::Reshape(x) => {
                if want(*x) {
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::GatherRows(x, rows) => {
                if want(*x) {
                    let (n, c) = self.value(*x).dims2().unwrap();
                    let mut gx = vec![0.0; n * c];
                    for (o, r) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += g[o * c + j];
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if want(*p) {
                        add_into(&mut grads[p.0], &g[at..at + len]);
                    }
                    at += len;
                }
            }
            Op::SegmentMean(x, offsets) => {
                if want(*x) {
                    let (n, c) = self.value(*x).dims2().unwrap();
                    let mut gx = vec![0.0; n * c];
                    for s in 0..offsets.len() - 1 {
                        let cnt = (offsets[s + 1] - offsets[s]) as f64;
                        for r in offsets[s]..offsets[s + 1] {
                            for j in 0..c {
                                gx[r * c + j] = g[s * c + j] / cnt;
                            }
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::SegmentScale(x, w, offsets) => {
                let (n, c) = self.value(*x).dims2().unwrap();
                let (dx, dw) = (self.data(*x), self.data(*w));
                if want(*x) {
                    let mut gx = vec![0.0; n * c];
                    for s in 0..offsets.len() - 1 {
                        for r in offsets[s]..offsets[s + 1] {
                            for j in 0..c {
                                gx[r * c + j] = g[r * c + j] * dw[s * c + j];
                            }
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
                if want(*w) {
                    let mut gw = vec![0.0; dw.len()];
                    for s in 0..offsets.len() - 1 {
                        for r in offsets[s]..offsets[s + 1] {
                            for j in 0..c {
                                gw[s * c + j] += g[r * c + j] * dx[r * c + j];
                            }
                        }
                    }
                    add_into(&mut grads[w.0], &gw);
                }
            }
            Op::ScatterMean { x, parent, counts } => {
                if want(*x) {
                    let (n, c) = self.value(*x).dims2().unwrap();
                    let mut gx = vec![0.0; n * c];
                    for (r, p) in parent.iter().enumerate() {
                        let inv = 1.0 / counts[*p] as f64;
                        for j in 0..c {
                            gx[r * c + j] = g[p * c + j] * inv;
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::SparseConv { x, w, bias, km } => {
                let (_, cin) = self.value(*x).dims2().unwrap();
                let cout = self.shape(*w)[2];
                let (dx, dw) = (self.data(*x), self.data(*w));
                if want(*x) {
                    let mut gx = vec![0.0; dx.len()];
                    for t in &km.triples {
                        let go = &g[t.out_row as usize * cout..(t.out_row as usize + 1) * cout];
                        let wk = &dw[t.offset as usize * cin * cout..(t.offset as usize + 1) * cin * cout];
                        let gi = &mut gx[t.in_row as usize * cin..(t.in_row as usize + 1) * cin];
                        for (ci, gv) in gi.iter_mut().enumerate() {
                            let wrow = &wk[ci * cout..(ci + 1) * cout];
                            let mut s = 0.0;
                            for (a, b) in go.iter().zip(wrow) {
                                s += a * b;
                            }
                            *gv += s;
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
                if want(*w) {
                    let mut gw = vec![0.0; dw.len()];
                    for t in &km.triples {
                        let go = &g[t.out_row as usize * cout..(t.out_row as usize + 1) * cout];
                        let xin = &dx[t.in_row as usize * cin..(t.in_row as usize + 1) * cin];
                        let gk = &mut gw[t.offset as usize * cin * cout..(t.offset as usize + 1) * cin * cout];
                        for (ci, xv) in xin.iter().enumerate() {
                            if *xv == 0.0 {
                                continue;
                            }
                            for (a, b) in gk[ci * cout..(ci + 1) * cout].iter_mut().zip(go) {
                                *a += xv * b;
                            }
                        }
                    }
                    add_into(&mut grads[w.0], &gw);
                }
                if let Some(b) = bias {
                    if want(*b) {
                        let mut gb = vec![0.0; cout];
                        for row in g.chunks(cout) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        add_into(&mut grads[b.0], &gb);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = self.value(*x).dims2().unwrap();
                let gm = self.data(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..n {
                    for j in 0..c {
                        sum_g[j] += g[r * c + j];
                        sum_gx[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
                if want(*x) {
                    let nf = n as f64;
                    let mut gx = vec![0.0; n * c];
                    for r in 0..n {
                        for j in 0..c {
                            let i = r * c + j;
                            gx[i] = gm[j] * inv_std[j] / nf * (nf * g[i] - sum_g[j] - xhat[i] * sum_gx[j]);
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
                if want(*gamma) {
                    add_into(&mut grads[gamma.0], &sum_gx);
                }
                if want(*beta) {
                    add_into(&mut grads[beta.0], &sum_g);
                }
            }
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = self.value(*x).dims2().unwrap();
                let gm = self.data(*gamma);
                if want(*x) {
                    let mut gx = vec![0.0; n * c];
                    for r in 0..n {
                        for j in 0..c {
                            gx[r * c + j] = g[r * c + j] * gm[j] * inv_std[j];
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..n {
                    for j in 0..c {
                        sum_g[j] += g[r * c + j];
                        sum_gx[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
                if want(*gamma) {
                    add_into(&mut grads[gamma.0], &sum_gx);
                }
                if want(*beta) {
                    add_into(&mut grads[beta.0], &sum_g);
                }
            }
            Op::DepthwiseConv1d { x, w, bias } => {
                let (t_len, e) = self.value(*x).dims2().unwrap();
                let k = self.shape(*w)[1];
                let (dx, dw) = (self.data(*x), self.data(*w));
                let mut gx = vec![0.0; t_len * e];
                let mut gw = vec![0.0; e * k];
                let mut gb = vec![0.0; e];
                for t in 0..t_len {
                    for ch in 0..e {
                        let gv = g[t * e + ch];
                        gb[ch] += gv;
                        for j in 0..k {
                            let src = t as isize - (k as isize - 1) + j as isize;
                            if src >= 0 {
                                let s = src as usize * e + ch;
                                gx[s] += gv * dw[ch * k + j];
                                gw[ch * k + j] += gv * dx[s];
                            }
                        }
                    }
                }
                if want(*x) {
                    add_into(&mut grads[x.0], &gx);
                }
                if want(*w) {
                    add_into(&mut grads[w.0], &gw);
                }
                if want(*bias) {
                    add_into(&mut grads[bias.0], &gb);
                }
            }
            Op::SelectiveScan {
                u,
                delta,
                a,
                b,
                c,
                d,
                states,
            } => {
                let (t_len, e) = self.value(*u).dims2().unwrap();
                let n = self.shape(*a)[1];
                let (du, dd, da, db, dc, dskip) = (
                    self.data(*u),
                    self.data(*delta),
                    self.data(*a),
                    self.data(*b),
                    self.data(*c),
                    self.data(*d),
                );
                let mut gu = vec![0.0; t_len * e];
                let mut gdelta = vec![0.0; t_len * e];
                let mut ga = vec![0.0; e * n];
                let mut gb = vec![0.0; t_len * n];
                let mut gc = vec![0.0; t_len * n];
                let mut gd = vec![0.0; e];
                // carry[ch, s] = dL/dh_t contributed by later steps
                let mut carry = vec![0.0; e * n];
                for t in (0..t_len).rev() {
                    let h_t = &states[t * e * n..(t + 1) * e * n];
                    for ch in 0..e {
                        let gy = g[t * e + ch];
                        let dt = dd[t * e + ch];
                        let x = du[t * e + ch];
                        gd[ch] += gy * x;
                        gu[t * e + ch] += gy * dskip[ch];
                        for s in 0..n {
                            let i = ch * n + s;
                            gc[t * n + s] += gy * h_t[i];
                            let gh = gy * dc[t * n + s] + carry[i];
                            let h_prev = if t > 0 { states[(t - 1) * e * n + i] } else { 0.0 };
                            let abar = (dt * da[i]).exp();
                            let g_abar = gh * h_prev * abar;
                            gdelta[t * e + ch] += g_abar * da[i] + gh * db[t * n + s] * x;
                            ga[i] += g_abar * dt;
                            gb[t * n + s] += gh * dt * x;
                            gu[t * e + ch] += gh * dt * db[t * n + s];
                            carry[i] = gh * abar;
                        }
                    }
                }
                for (v, gv) in [(*u, gu), (*delta, gdelta), (*a, ga), (*b, gb), (*c, gc), (*d, gd)] {
                    if want(v) {
                        add_into(&mut grads[v.0], &gv);
                    }
                }
            }
            Op::LtiScan {
                x,
                abar,
                bbar,
                c,
                d,
                h0,
                states,
            } => {
                let (t_len, ch) = self.value(*x).dims2().unwrap();
                let n = self.shape(*abar)[1];
                let (dx, da, db, dc, dd) = (
                    self.data(*x),
                    self.data(*abar),
                    self.data(*bbar),
                    self.data(*c),
                    self.data(*d),
                );
                let mut gx = vec![0.0; t_len * ch];
                let mut ga = vec![0.0; ch * n];
                let mut gb = vec![0.0; ch * n];
                let mut gc = vec![0.0; ch * n];
                let mut gd = vec![0.0; ch];
                let mut carry = vec![0.0; ch * n];
                for t in (0..t_len).rev() {
                    let h_t = &states[t * ch * n..(t + 1) * ch * n];
                    let h_prev = if t > 0 {
                        &states[(t - 1) * ch * n..t * ch * n]
                    } else {
                        &h0[..]
                    };
                    for k in 0..ch {
                        let gy = g[t * ch + k];
                        let xv = dx[t * ch + k];
                        gd[k] += gy * xv;
                        gx[t * ch + k] += gy * dd[k];
                        for s in 0..n {
                            let i = k * n + s;
                            gc[i] += gy * h_t[i];
                            let gh = gy * dc[i] + carry[i];
                            ga[i] += gh * h_prev[i];
                            gb[i] += gh * xv;
                            gx[t * ch + k] += gh * db[i];
                            carry[i] = gh * da[i];
                        }
                    }
                }
                for (v, gv) in [(*x, gx), (*abar, ga), (*bbar, gb), (*c, gc), (*d, gd)] {
                    if want(v) {
                        add_into(&mut grads[v.0], &gv);
                    }
                }
            }
        }
    }
}

fn check_offsets(offsets: &[usize], n: usize) -> Result<()> {
    if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != n || offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Shape(format!("segment offsets {offsets:?} do not partition {n} rows")));
    }
    Ok(())
}

/// Dense matrix product helper for value-level code.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb)?;
    Ok(tape.value(c).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> DenseTensor {
        DenseTensor::from_rows(rows)
    }

    #[test]
    fn matmul_examples() {
        let i2 = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = t2(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&i2, &b).unwrap(), b);
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        let z = DenseTensor::zeros(&[2, 2]);
        assert_eq!(matmul(&z, &b).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&DenseTensor::zeros(&[2, 3]), &DenseTensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && matches!(err, Error::Shape(_)), "{msg}");
    }

    #[test]
    fn activations_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(DenseTensor::scalar(0.0));
        let g = tape.gelu(x);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(g).data(), &[0.0]);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(DenseTensor::zeros(&[2]));
        let b = tape.constant(DenseTensor::zeros(&[3]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
        let m = tape.constant(DenseTensor::zeros(&[2, 3]));
        assert!(tape.broadcast(Binary::Add, m, a, Broadcast::Leading).is_err());
        assert!(tape.broadcast(Binary::Mul, m, a, Broadcast::Trailing).is_ok());
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(DenseTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
        let m = tape.mean(x, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0]);
        let c = tape.constant(DenseTensor::full(&[4, 2], 7.5));
        let mc = tape.mean(c, 0).unwrap();
        assert_eq!(tape.value(mc).data(), &[7.5, 7.5]);
        let s = tape.sum(x, 0).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
        let mx = tape.reduce(ReduceKind::Max, x, 0).unwrap();
        assert_eq!(tape.value(mx).data(), &[3.0]);
    }

    #[test]
    fn reduce_empty_axis_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.constant(DenseTensor::zeros(&[0, 2]));
        assert!(matches!(tape.mean(x, 0), Err(Error::Domain(_))));
        assert!(matches!(tape.mean(x, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn product_rule_and_disconnected_leaf() {
        let mut tape = Tape::new();
        let x = tape.leaf(DenseTensor::scalar(3.0).with_grad());
        let y = tape.leaf(DenseTensor::scalar(5.0).with_grad());
        let z = tape.leaf(DenseTensor::scalar(11.0).with_grad());
        let loss = tape.mul(x, y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[5.0]);
        assert_eq!(g.wrt(y).data(), &[3.0]);
        assert_eq!(g.wrt(z).data(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(DenseTensor::zeros(&[2]).with_grad());
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn segment_mean_rejects_empty_segment() {
        let mut tape = Tape::new();
        let x = tape.constant(DenseTensor::zeros(&[2, 1]));
        let err = tape.segment_mean(x, Arc::from(vec![0, 2, 2])).unwrap_err();
        assert!(err.to_string().contains("batch item 1"));
    }

    #[test]
    fn reused_node_accumulates() {
        // loss = x*x + x  => d/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(DenseTensor::scalar(4.0).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.add(sq, x).unwrap();
        assert_eq!(tape.backward(loss).unwrap().wrt(x).data(), &[9.0]);
    }
}
