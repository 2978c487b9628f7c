//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive op in execution order, so the tape is
//! topologically sorted by construction. [`Graph::backward`] borrows the tape
//! immutably and returns a fresh [`Gradients`] table: the graph stays
//! reusable and backward may be called more than once.
//!
//! The op set is closed: matmul, add, sub, mul (with broadcasting), scale,
//! add-scalar, relu, sigmoid, exp, log, softmax, log-softmax, layer norm,
//! embedding gather, permute, reshape, masked fill, sum and mean. Every model
//! computation composes from these.

use crate::error::{contract, dim_err, Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    /// Source index of every output entry.
    Permute(Var, Vec<usize>),
    Reshape(Var),
    MaskedFill(Var, Vec<bool>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// The recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Right-aligned broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return dim_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// For every flat output index, the flat index into an operand of `shape`
/// broadcast to `out`.
fn broadcast_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n_out = numel(out);
    if shape == out {
        return (0..n_out).collect();
    }
    let src_n = numel(shape);
    // trailing suffix broadcast: operand repeats every src_n entries
    let off = out.len() - shape.len();
    if shape == &out[off..] {
        return (0..n_out).map(|i| i % src_n).collect();
    }
    let mut strides = vec![0usize; out.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + off] = s;
        }
        s *= shape[i];
    }
    let mut idx = vec![0usize; out.len()];
    let mut res = Vec::with_capacity(n_out);
    let mut cur = 0usize;
    for _ in 0..n_out {
        res.push(cur);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    res
}

/// `c += op(a) · op(b)` with strides picked so transposes cost nothing.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (isize, isize), b: &[f64], (rsb, csb): (isize, isize), c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides address exactly the m×k, k×n and m×n entries of
    // the slices, whose lengths are checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`.
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c);
}

/// `c += a · bᵀ` for `a: m×n`, `b: k×n`, `c: m×k`.
fn mm_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    gemm(m, n, k, a, (n as isize, 1), b, (1, n as isize), c);
}

/// `c += aᵀ · b` for `a: m×k`, `b: m×n`, `c: k×n`.
fn mm_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(k, m, n, a, (1, k as isize), b, (n as isize, 1), c);
}

fn permute_index(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for d in (0..nd).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            // every entry masked: uniform
            o.iter_mut().for_each(|v| *v = 1.0 / width as f64);
            continue;
        }
        let mut z = 0.0;
        for (ov, &xv) in o.iter_mut().zip(row) {
            *ov = (xv - max).exp();
            z += *ov;
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn log_softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (ov, &xv) in o.iter_mut().zip(row) {
            *ov = xv - lse;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest `|x|` fed to any relu on the tape; `None` when there is none.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flatten()
            .map(|x| x.abs())
            .reduce(f64::min)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are valid")
    }

    /// Records a leaf. It requires a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        if numel(shape) != value.len() {
            return dim_err(format!("constant of shape {shape:?} with {} values", value.len()));
        }
        Ok(self.push(shape.to_vec(), value, false, Op::Leaf))
    }

    /// Records a leaf with an explicit gradient flag.
    pub fn input(&mut self, shape: &[usize], value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != value.len() {
            return dim_err(format!("input of shape {shape:?} with {} values", value.len()));
        }
        Ok(self.push(shape.to_vec(), value, requires_grad, Op::Leaf))
    }

    /// Binds an externally owned parameter under `key`, once per graph.
    pub fn bind(&mut self, key: usize, t: &Tensor, requires_grad: bool) -> Var {
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf);
        self.bound.insert(key, v);
        v
    }

    /// Makes later [`Graph::bind`] calls for `key` resolve to `v`.
    pub fn preset(&mut self, key: usize, v: Var) {
        self.bound.insert(key, v);
    }

    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.bound.iter().map(|(&k, &v)| (k, v))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out = broadcast_shape(sa, sb)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let value = if sa == sb {
            va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let ia = broadcast_index(sa, &out);
            let ib = broadcast_index(sb, &out);
            ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        Ok((out, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, v, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, v, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, v, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let s = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(s, v, rg, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| x + c).collect();
        let s = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(s, v, rg, Op::AddScalar(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let s = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(s, v, rg, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log; inputs must be positive.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// `|a|`, composed as `relu(a) + relu(-a)`.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let pos = self.relu(a);
        let neg_a = self.scale(a, -1.0);
        let neg = self.relu(neg_a);
        self.add(pos, neg)
    }

    /// Softmax over the trailing axis, stabilised by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].shape.clone();
        let w = *s.last().expect("non-empty shape");
        let v = softmax_rows(&self.nodes[a.0].value, w);
        let rg = self.rg(a);
        self.push(s, v, rg, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].shape.clone();
        let w = *s.last().expect("non-empty shape");
        let v = log_softmax_rows(&self.nodes[a.0].value, w);
        let rg = self.rg(a);
        self.push(s, v, rg, Op::LogSoftmax(a))
    }

    /// Softmax of `a / temperature` over the trailing axis.
    pub fn softmax_with_temperature(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let scaled = if temperature == 1.0 { a } else { self.scale(a, 1.0 / temperature) };
        Ok(self.softmax(scaled))
    }

    pub fn log_softmax_with_temperature(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let scaled = if temperature == 1.0 { a } else { self.scale(a, 1.0 / temperature) };
        Ok(self.log_softmax(scaled))
    }

    /// Layer normalisation over the trailing axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("layer norm eps must be positive, got {eps}")));
        }
        let s = self.nodes[x.0].shape.clone();
        let d = *s.last().expect("non-empty shape");
        if self.nodes[gain.0].value.len() != d || self.nodes[bias.0].value.len() != d {
            return dim_err(format!(
                "layer norm over {s:?} with gain {:?} and bias {:?}",
                self.nodes[gain.0].shape, self.nodes[bias.0].shape
            ));
        }
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(s, out, rg, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Gathers rows of a `[V, d]` table; output shape is `id_shape ++ [d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], id_shape: &[usize]) -> Result<Var> {
        let ts = &self.nodes[table.0].shape;
        if ts.len() != 2 {
            return dim_err(format!("embedding table must be 2-D, got {ts:?}"));
        }
        if numel(id_shape) != ids.len() {
            return dim_err(format!("{} ids for id shape {id_shape:?}", ids.len()));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return dim_err(format!("id {bad} out of range for table with {rows} rows"));
        }
        let tv = &self.nodes[table.0].value;
        let mut v = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            v.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut s = id_shape.to_vec();
        s.push(d);
        let rg = self.rg(table);
        Ok(self.push(s, v, rg, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Matrix product over the last two axes. `b` is either 2-D (shared
    /// across every leading index of `a`) or carries the same leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() < 2 || sb.len() < 2 {
            return dim_err(format!("matmul needs ≥2-D operands, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return dim_err(format!("matmul inner extents differ: {sa:?} × {sb:?}"));
        }
        let batch: usize = numel(&sa[..sa.len() - 2]);
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return dim_err(format!("matmul batch extents differ: {sa:?} × {sb:?}"));
        }
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let mut out = vec![0.0; batch * m * n];
        if shared_b {
            mm_acc(va, vb, &mut out, batch * m, k, n);
        } else {
            for t in 0..batch {
                mm_acc(
                    &va[t * m * k..(t + 1) * m * k],
                    &vb[t * k * n..(t + 1) * k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut s = sa[..sa.len() - 2].to_vec();
        s.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, out, rg, Op::MatMul(a, b)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("invalid permutation {perm:?} for shape {s:?}"));
        }
        let (out_shape, map) = permute_index(&s, perm);
        let src = &self.nodes[a.0].value;
        let v = map.iter().map(|&i| src[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(out_shape, v, rg, Op::Permute(a, map)))
    }

    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let nd = self.nodes[a.0].shape.len();
        if nd < 2 {
            return dim_err("transpose needs ≥2 axes");
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 1, nd - 2);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[a.0].value.len() || shape.contains(&0) {
            return dim_err(format!(
                "cannot reshape {:?} to {shape:?}",
                self.nodes[a.0].shape
            ));
        }
        let v = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), v, rg, Op::Reshape(a)))
    }

    /// Replaces entries where `mask` is true by `fill`. `mask` covers the
    /// full shape of `a`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        if mask.len() != self.nodes[a.0].value.len() {
            return dim_err(format!(
                "mask of length {} for shape {:?}",
                mask.len(),
                self.nodes[a.0].shape
            ));
        }
        let v = self.nodes[a.0]
            .value
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let s = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        Ok(self.push(s, v, rg, Op::MaskedFill(a, mask.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![total], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let total = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![total], rg, Op::Mean(a))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients of nodes used by several consumers are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    /// Adds an output-shaped gradient into an operand that was broadcast.
    fn acc_broadcast(&self, grads: &mut [Option<Vec<f64>>], v: Var, out_shape: &[usize], g: &[f64], sign: f64) {
        let shape = &self.nodes[v.0].shape;
        let Some(dst) = self.acc(grads, v) else { return };
        if shape == out_shape {
            for (d, x) in dst.iter_mut().zip(g) {
                *d += sign * x;
            }
        } else if out_shape.ends_with(shape) {
            for chunk in g.chunks(dst.len()) {
                for (d, x) in dst.iter_mut().zip(chunk) {
                    *d += sign * x;
                }
            }
        } else {
            for (i, &j) in broadcast_index(shape, out_shape).iter().enumerate() {
                dst[j] += sign * g[i];
            }
        }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_broadcast(grads, *a, &node.shape, g, 1.0);
                self.acc_broadcast(grads, *b, &node.shape, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(grads, *a, &node.shape, g, 1.0);
                self.acc_broadcast(grads, *b, &node.shape, g, -1.0);
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (ia, ib) = if sa == sb {
                    (None, None)
                } else {
                    (
                        Some(broadcast_index(sa, &node.shape)),
                        Some(broadcast_index(sb, &node.shape)),
                    )
                };
                let at = |i: usize, m: &Option<Vec<usize>>| m.as_ref().map_or(i, |m| m[i]);
                if self.rg(*a) {
                    let ga: Vec<f64> = (0..g.len()).map(|i| g[i] * vb[at(i, &ib)]).collect();
                    self.acc_broadcast(grads, *a, &node.shape, &ga, 1.0);
                }
                if self.rg(*b) {
                    let gb: Vec<f64> = (0..g.len()).map(|i| g[i] * va[at(i, &ia)]).collect();
                    self.acc_broadcast(grads, *b, &node.shape, &gb, 1.0);
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        d[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        d[i] += g[i] * out[i];
                    }
                }
            }
            Op::Log(a) => {
                let x = &self.nodes[a.0].value;
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        d[i] += g[i] / x[i];
                    }
                }
            }
            Op::Softmax(a) => {
                let w = *node.shape.last().unwrap();
                if let Some(d) = self.acc(grads, *a) {
                    for r in 0..g.len() / w {
                        let (y, gy) = (&out[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..w {
                            d[r * w + j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let w = *node.shape.last().unwrap();
                if let Some(d) = self.acc(grads, *a) {
                    for r in 0..g.len() / w {
                        let gy = &g[r * w..(r + 1) * w];
                        let total: f64 = gy.iter().sum();
                        for j in 0..w {
                            d[r * w + j] += gy[j] - out[r * w + j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let w = *node.shape.last().unwrap();
                let rows = g.len() / w;
                let gv = &self.nodes[gain.0].value;
                if let Some(d) = self.acc(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..w {
                            d[j] += g[r * w + j] * xhat[r * w + j];
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..w {
                            d[j] += g[r * w + j];
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; w];
                    for r in 0..rows {
                        let h = &xhat[r * w..(r + 1) * w];
                        for j in 0..w {
                            dxhat[j] = g[r * w + j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / w as f64;
                        let m2 = dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        for j in 0..w {
                            d[r * w + j] += rstd[r] * (dxhat[j] - m1 - h[j] * m2);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let w = self.nodes[table.0].shape[1];
                if let Some(d) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..w {
                            d[id * w + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let sa = &self.nodes[a.0].shape;
                let sb = &self.nodes[b.0].shape;
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = numel(&sa[..sa.len() - 2]);
                let shared_b = sb.len() == 2;
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                if let Some(d) = self.acc(grads, *a) {
                    if shared_b {
                        mm_bt_acc(g, vb, d, batch * m, n, k);
                    } else {
                        for t in 0..batch {
                            mm_bt_acc(
                                &g[t * m * n..(t + 1) * m * n],
                                &vb[t * k * n..(t + 1) * k * n],
                                &mut d[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    if shared_b {
                        mm_at_acc(va, g, d, batch * m, k, n);
                    } else {
                        for t in 0..batch {
                            mm_at_acc(
                                &va[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut d[t * k * n..(t + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Permute(a, map) => {
                if let Some(d) = self.acc(grads, *a) {
                    for (i, &src) in map.iter().enumerate() {
                        d[src] += g[i];
                    }
                }
            }
            Op::MaskedFill(a, mask) => {
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if !mask[i] {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|v| *v += s);
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
