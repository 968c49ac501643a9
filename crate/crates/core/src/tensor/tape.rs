//! Wengert-list reverse-mode autodiff over dense `f64` tensors.
//!
//! Every op appends a node to the tape. A node needs a gradient only when
//! one of its inputs does, and parameter leaves need one only when the
//! parameter is trainable. Backward walks the needs-gradient nodes alone, so
//! a frozen sub-graph (e.g. the bottom encoder layers) costs nothing there.

use std::collections::HashMap;

use rand::Rng as _;

use super::param::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `sqrt(2/pi)` and the cubic coefficient of the tanh-form GELU:
/// `gelu(x) = 0.5 x (1 + tanh(GELU_C (x + GELU_A x^3)))`.
pub const GELU_C: f64 = 0.797_884_560_802_865_4;
pub const GELU_A: f64 = 0.044_715;

/// Additive bias placed on masked key positions before softmax.
pub const MASK_BIAS: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Test hooks that corrupt a backward rule on purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// Negate the GELU derivative.
    FlipGeluGrad,
}

enum Storage<'a> {
    Owned(Vec<f64>),
    Borrowed(&'a [f64]),
}

impl Storage<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Storage::Owned(v) => v,
            Storage::Borrowed(s) => s,
        }
    }
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    GatherRows { table: Var, rows: Vec<usize> },
    KeyMask { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    /// Keeps the inner tanh for the backward pass.
    Gelu { x: Var, t: Vec<f64> },
    Tanh { x: Var },
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<i64>, count: usize },
    Sum { x: Var },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::GatherRows { .. } => "gather_rows",
            Op::KeyMask { .. } => "key_mask",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Tanh { .. } => "tanh",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Storage<'a>,
    op: Op,
    needs_grad: bool,
}

/// Result of a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Backward {
    pub grads: Gradients,
    /// Kind of every node processed, in visiting order.
    pub visited: Vec<&'static str>,
}

/// Recording of one forward computation.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    /// Ascending indices of nodes that need a gradient.
    grad_nodes: Vec<usize>,
    param_leaves: HashMap<ParamId, Var>,
    mutation: Mutation,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `c = beta * c + a * b` for an `m x k` by `k x n` product with explicit
/// row/column strides on every operand.
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
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        (rows - 1) * rs + cols.saturating_sub(1) * cs
    };
    assert!(k == 0 || last(m, k, rsa, csa) < a.len());
    assert!(k == 0 || last(k, n, rsb, csb) < b.len());
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above bound every offset the kernel touches.
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
            rsc as isize,
            csc as isize,
        );
    }
}

/// For every linear index of the broadcast `out` batch shape, the linear
/// index into `src` (whose dims are right-aligned against `out`).
fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let total = numel(out);
    let offset = out.len() - src.len();
    let mut src_strides = vec![0usize; out.len()];
    let mut stride = 1;
    for i in (0..src.len()).rev() {
        src_strides[offset + i] = if src[i] == 1 { 0 } else { stride };
        stride *= src[i];
    }
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let len = a.len().max(b.len());
    let mut out = vec![0; len];
    for i in 0..len {
        let da = if i + a.len() >= len { a[i + a.len() - len] } else { 1 };
        let db = if i + b.len() >= len { b[i + b.len() - len] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            grad_nodes: Vec::new(),
            param_leaves: HashMap::new(),
            mutation: Mutation::None,
        }
    }

    pub fn with_mutation(mut self, mutation: Mutation) -> Self {
        self.mutation = mutation;
        self
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Storage<'a>, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        debug_assert_eq!(numel(&shape), value.as_slice().len());
        if needs_grad {
            self.grad_nodes.push(idx);
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(idx)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "constant of shape {shape:?} given {} values",
                data.len()
            )));
        }
        Ok(self.push(shape, Storage::Owned(data), Op::Constant, false))
    }

    /// Leaf for a stored parameter; repeated calls return the same node, so
    /// a parameter used in several places accumulates one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(
            p.shape.clone(),
            Storage::Borrowed(&p.data),
            Op::Param(id),
            p.trainable(),
        );
        self.param_leaves.insert(id, v);
        v
    }

    /// Batched matrix product `a[.., m, k] x b[.., k, n]`; with `trans_b`
    /// the second operand is stored as `[.., n, k]`. Batch dims broadcast.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || {
            Error::Shape(format!(
                "matmul of {sa:?} and {sb:?}{}",
                if trans_b { " (b transposed)" } else { "" }
            ))
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(err());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = broadcast_shapes(ba, bb).ok_or_else(err)?;
        let map_a = broadcast_map(&batch, ba);
        let map_b = broadcast_map(&batch, bb);
        let mut out = vec![0.0; numel(&batch) * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            let bstr = if trans_b { (1, k) } else { (n, 1) };
            for (i, c) in out.chunks_mut(m * n).enumerate() {
                let ablk = &av[map_a[i] * m * k..(map_a[i] + 1) * m * k];
                let bblk = &bv[map_b[i] * k * n..(map_b[i] + 1) * k * n];
                gemm(m, k, n, ablk, (k, 1), bblk, bstr, 0.0, c, (n, 1));
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(shape, Storage::Owned(out), Op::MatMul { a, b, trans_b }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), Storage::Owned(out), Op::Add { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), Storage::Owned(out), Op::Mul { a, b }, ng))
    }

    /// `x[.., n] + bias[n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "bias {:?} against input {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let bv = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            add_into(row, bv);
        }
        let ng = self.any_grad(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), Storage::Owned(out), Op::AddBias { x, bias }, ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let ng = self.any_grad(&[x]);
        self.push(self.shape(x).to_vec(), Storage::Owned(out), Op::Scale { x, factor }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(x)) {
            return Err(Error::Shape(format!(
                "reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let ng = self.any_grad(&[x]);
        Ok(self.push(shape, Storage::Owned(out), Op::Reshape { x }, ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("permutation {perm:?} of {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.value(x), &shape, perm);
        let ng = self.any_grad(&[x]);
        Ok(self.push(out_shape, Storage::Owned(out), Op::Permute { x, perm: perm.to_vec() }, ng))
    }

    /// Row lookup `table[rows[i], :]` on a 2-D table (embedding lookup,
    /// masked-position selection).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::Shape(format!("gather_rows on {shape:?}")));
        }
        let (r, c) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} out of range for {r} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let ng = self.any_grad(&[table]);
        Ok(self.push(
            vec![rows.len(), c],
            Storage::Owned(out),
            Op::GatherRows { table, rows: rows.to_vec() },
            ng,
        ))
    }

    /// Adds [`MASK_BIAS`] to attention scores `[B, A, Sq, Sk]` at key
    /// positions where `key_mask[b, k] == 0`.
    pub fn key_mask(&mut self, scores: Var, key_mask: &[u8]) -> Result<Var> {
        let shape = self.shape(scores).to_vec();
        if shape.len() != 4 || key_mask.len() != shape[0] * shape[3] {
            return Err(Error::Shape(format!(
                "key mask of {} entries for scores {shape:?}",
                key_mask.len()
            )));
        }
        let (b, a, sq, sk) = (shape[0], shape[1], shape[2], shape[3]);
        let mut out = self.value(scores).to_vec();
        for bi in 0..b {
            let mask = &key_mask[bi * sk..(bi + 1) * sk];
            for row in out[bi * a * sq * sk..(bi + 1) * a * sq * sk].chunks_mut(sk) {
                for (v, &m) in row.iter_mut().zip(mask) {
                    if m == 0 {
                        *v += MASK_BIAS;
                    }
                }
            }
        }
        let ng = self.any_grad(&[scores]);
        Ok(self.push(shape, Storage::Owned(out), Op::KeyMask { x: scores }, ng))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        if inner == 1 {
            for (orow, row) in out.chunks_mut(len).zip(xv.chunks(len)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o = (v - max).exp();
                    sum += *o;
                }
                let inv = 1.0 / sum;
                orow.iter_mut().for_each(|o| *o *= inv);
            }
            let ng = self.any_grad(&[x]);
            return Ok(self.push(shape, Storage::Owned(out), Op::Softmax { x, axis }, ng));
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(shape, Storage::Owned(out), Op::Softmax { x, axis }, ng))
    }

    /// Layer normalization over the last dimension, then `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::Shape(format!(
                "layer_norm gamma {:?} / beta {:?} against input {shape:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Shape(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            Storage::Owned(out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            ng,
        ))
    }

    /// Tanh-approximation GELU with constants [`GELU_C`] and [`GELU_A`].
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t: Vec<f64> = xv.iter().map(|&v| fast_tanh(GELU_C * (v + GELU_A * v * v * v))).collect();
        let out = xv.iter().zip(&t).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let ng = self.any_grad(&[x]);
        let t = if ng { t } else { Vec::new() };
        self.push(self.shape(x).to_vec(), Storage::Owned(out), Op::Gelu { x, t }, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let ng = self.any_grad(&[x]);
        self.push(self.shape(x).to_vec(), Storage::Owned(out), Op::Tanh { x }, ng)
    }

    /// Inverted dropout. A zero rate returns `x` unchanged without recording.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let ng = self.any_grad(&[x]);
        self.push(self.shape(x).to_vec(), Storage::Owned(out), Op::Dropout { x, mask }, ng)
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` over
    /// rows whose target is not `ignore_index`. All rows ignored gives 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore_index: i64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy logits {shape:?} with {} targets",
                targets.len()
            )));
        }
        let v = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore_index && (t < 0 || t as usize >= v)) {
            return Err(Error::Index(format!("target {bad} out of range for {v} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            if t != ignore_index {
                total += lse - row[t as usize];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.any_grad(&[logits]);
        Ok(self.push(
            vec![1],
            Storage::Owned(vec![loss]),
            Op::CrossEntropy { logits, probs, targets: targets.to_vec(), count },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.any_grad(&[x]);
        self.push(vec![1], Storage::Owned(vec![s]), Op::Sum { x }, ng)
    }

    /// Reverse pass from a one-element `loss`. Only nodes that need a
    /// gradient are visited; parameter gradients are returned rather than
    /// written, so the caller decides how to accumulate them.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut out = Backward::default();
        if !self.needs_grad(loss) {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        let start = self.grad_nodes.partition_point(|&i| i <= loss.0);
        for &idx in self.grad_nodes[..start].iter().rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            out.visited.push(node.op.kind());
            self.backward_node(node, &g, &mut grads, &mut out.grads);
        }
        Ok(out)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.value.as_slice().len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(
        &self,
        node: &Node<'_>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut Gradients,
    ) {
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                let slot = params.by_param.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
                add_into(slot, g);
            }
            Op::MatMul { a, b, trans_b } => self.backward_matmul(*a, *b, *trans_b, &node.shape, g, grads),
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(s) = self.grad_slot(grads, v) {
                        add_into(s, g);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(s) = self.grad_slot(grads, *a) {
                    s.iter_mut().zip(g).zip(bv).for_each(|((s, g), b)| *s += g * b);
                }
                if let Some(s) = self.grad_slot(grads, *b) {
                    s.iter_mut().zip(g).zip(av).for_each(|((s, g), a)| *s += g * a);
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(s) = self.grad_slot(grads, *x) {
                    add_into(s, g);
                }
                if let Some(s) = self.grad_slot(grads, *bias) {
                    let n = s.len();
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(s) = self.grad_slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g * factor);
                }
            }
            Op::Reshape { x } | Op::KeyMask { x } => {
                if let Some(s) = self.grad_slot(grads, *x) {
                    add_into(s, g);
                }
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, &node.shape, &inv);
                if let Some(s) = self.grad_slot(grads, *x) {
                    add_into(s, &back);
                }
            }
            Op::GatherRows { table, rows } => {
                let c = node.shape[1];
                if let Some(s) = self.grad_slot(grads, *table) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut s[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.as_slice();
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                if let Some(s) = self.grad_slot(grads, *x) {
                    if inner == 1 {
                        for ((srow, grow), yrow) in s.chunks_mut(len).zip(g.chunks(len)).zip(y.chunks(len)) {
                            let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                            for ((s, g), y) in srow.iter_mut().zip(grow).zip(yrow) {
                                *s += y * (g - dot);
                            }
                        }
                        return;
                    }
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = *node.shape.last().unwrap();
                let gv = self.value(*gamma);
                if let Some(s) = self.grad_slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            s[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(s) = self.grad_slot(grads, *beta) {
                    for grow in g.chunks(n) {
                        add_into(s, grow);
                    }
                }
                if let Some(s) = self.grad_slot(grads, *x) {
                    let inv_n = 1.0 / n as f64;
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let d = grow[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hrow[j];
                        }
                        mean_d *= inv_n;
                        mean_dh *= inv_n;
                        let out = &mut s[r * n..(r + 1) * n];
                        for j in 0..n {
                            let d = grow[j] * gv[j];
                            out[j] += rstd[r] * (d - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Gelu { x, t } => {
                let sign = if self.mutation == Mutation::FlipGeluGrad { -1.0 } else { 1.0 };
                let xv = self.value(*x);
                if let Some(s) = self.grad_slot(grads, *x) {
                    for (((s, g), &v), &t) in s.iter_mut().zip(g).zip(xv).zip(t) {
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *s += sign * g * d;
                    }
                }
            }
            Op::Tanh { x } => {
                let y = node.value.as_slice();
                if let Some(s) = self.grad_slot(grads, *x) {
                    s.iter_mut().zip(g).zip(y).for_each(|((s, g), y)| *s += g * (1.0 - y * y));
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(s) = self.grad_slot(grads, *x) {
                    s.iter_mut().zip(g).zip(mask).for_each(|((s, g), m)| *s += g * m);
                }
            }
            Op::CrossEntropy { logits, probs, targets, count } => {
                if *count == 0 {
                    return;
                }
                let v = probs.len() / targets.len();
                let scale = g[0] / *count as f64;
                if let Some(s) = self.grad_slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t < 0 {
                            continue;
                        }
                        for j in 0..v {
                            s[r * v + j] += scale * probs[r * v + j];
                        }
                        s[r * v + t as usize] -= scale;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(s) = self.grad_slot(grads, *x) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
        }
    }

    fn backward_matmul(
        &self,
        a: Var,
        b: Var,
        trans_b: bool,
        out_shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = out_shape[out_shape.len() - 1];
        let batch = &out_shape[..out_shape.len() - 2];
        let av = self.value(a);
        let bv = self.value(b);
        if self.needs_grad(a) {
            let map_a = broadcast_map(batch, &sa[..sa.len() - 2]);
            let map_b = broadcast_map(batch, &sb[..sb.len() - 2]);
            let da = self.grad_slot(grads, a).unwrap();
            // dA = dC * op(B)^T
            let bstr = if trans_b { (k, 1) } else { (1, n) };
            for (i, gc) in g.chunks(m * n).enumerate() {
                let bblk = &bv[map_b[i] * k * n..(map_b[i] + 1) * k * n];
                let dblk = &mut da[map_a[i] * m * k..(map_a[i] + 1) * m * k];
                gemm(m, n, k, gc, (n, 1), bblk, bstr, 1.0, dblk, (k, 1));
            }
        }
        if self.needs_grad(b) {
            let map_a = broadcast_map(batch, &sa[..sa.len() - 2]);
            let map_b = broadcast_map(batch, &sb[..sb.len() - 2]);
            let db = self.grad_slot(grads, b).unwrap();
            for (i, gc) in g.chunks(m * n).enumerate() {
                let ablk = &av[map_a[i] * m * k..(map_a[i] + 1) * m * k];
                let dblk = &mut db[map_b[i] * k * n..(map_b[i] + 1) * k * n];
                if trans_b {
                    // dB[n, k] = dC^T * A
                    gemm(n, m, k, gc, (1, n), ablk, (k, 1), 1.0, dblk, (k, 1));
                } else {
                    // dB[k, n] = A^T * dC
                    gemm(k, m, n, ablk, (1, k), gc, (n, 1), 1.0, dblk, (n, 1));
                }
            }
        }
    }
}

/// `tanh` through a single `exp`; absolute error stays within a few ulps
/// of 1, several times cheaper than the libm routine.
fn fast_tanh(z: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * z).exp() + 1.0)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}
