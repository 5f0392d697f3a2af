//! Dense multi-dimensional tensors with tape-based reverse-mode autodiff.
//!
//! Design notes:
//! - Eager evaluation: every op computes its forward value immediately and
//!   records what the backward pass needs on the tape.
//! - Gradients accumulate in tape order, so repeated runs with identical
//!   inputs are bitwise identical.
//! - Broadcasting is limited to scalar-vs-tensor and equal shapes. Row-wise
//!   bias addition is its own explicit op (`add_bias`), not a broadcast.
//! - A tape can run backward exactly once; a second call is rejected.
//! - GELU uses the tanh form
//!   `0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))`
//!   with `sqrt(2/pi) = 0.7978845608028654`.

pub mod io;

use std::cell::RefCell;
use std::fmt;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    Domain {
        op: &'static str,
        value: f64,
    },
    InvalidPermutation {
        detail: String,
    },
    NonScalarLoss {
        shape: Vec<usize>,
    },
    TapeConsumed,
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            TensorError::BadShape { op, shape, detail } => {
                write!(f, "{op}: bad shape {shape:?}: {detail}")
            }
            TensorError::Domain { op, value } => {
                write!(f, "{op}: domain violation at value {value}")
            }
            TensorError::InvalidPermutation { detail } => {
                write!(f, "index_permute: invalid permutation: {detail}")
            }
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward: loss must be scalar, got shape {shape:?}")
            }
            TensorError::TapeConsumed => {
                write!(f, "backward: tape already consumed by a previous backward pass")
            }
        }
    }
}

impl std::error::Error for TensorError {}

pub type Result<T> = std::result::Result<T, TensorError>;

/// How a node was produced; holds whatever the backward pass needs.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddBias { x: usize, b: usize },
    Gelu { a: usize },
    Exp { a: usize },
    Ln { a: usize },
    SoftmaxRows { a: usize },
    LogsumexpRows { a: usize },
    Layernorm { x: usize, gain: usize, bias: usize, eps: f64 },
    IndexPermute { a: usize, perm: Vec<usize> },
    Reshape { a: usize },
    Transpose2 { a: usize },
    ConcatRows { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    Gather { a: usize, indices: Vec<usize> },
    SumAll { a: usize },
    MeanAll { a: usize },
    MeanRows { a: usize },
    L2NormalizeRows { a: usize },
    StandardizeCols { a: usize, eps: f64 },
    ResizeBilinear { a: usize, h: usize, w: usize, h2: usize, w2: usize },
    StopGrad,
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
    op: Op,
}

struct TapeInner<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
    bindings: Vec<(usize, usize)>, // (caller slot, node id)
}

/// Records a forward computation and replays it backward exactly once.
pub struct Tape<S: Scalar> {
    inner: RefCell<TapeInner<S>>,
}

/// Handle to a value living on a tape. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Tensor<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> fmt::Debug for Tensor<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.id, self.shape())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row/col split of a shape: everything but the last axis flattens into rows.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (numel(shape) / cols.max(1), cols)
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
                bindings: Vec::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Op) -> Tensor<'_, S> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            data,
            requires_grad,
            grad: None,
            op,
        });
        Tensor {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    /// Constant leaf (no gradient).
    pub fn leaf(&self, data: Vec<S>, shape: &[usize]) -> Result<Tensor<'_, S>> {
        if numel(shape) != data.len() {
            return Err(TensorError::BadShape {
                op: "leaf",
                shape: shape.to_vec(),
                detail: format!("shape wants {} elements, data has {}", numel(shape), data.len()),
            });
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Differentiable leaf.
    pub fn leaf_grad(&self, data: Vec<S>, shape: &[usize]) -> Result<Tensor<'_, S>> {
        if numel(shape) != data.len() {
            return Err(TensorError::BadShape {
                op: "leaf",
                shape: shape.to_vec(),
                detail: format!("shape wants {} elements, data has {}", numel(shape), data.len()),
            });
        }
        Ok(self.push(shape.to_vec(), data, true, Op::Leaf))
    }

    /// Differentiable leaf registered under a caller-chosen slot so its
    /// gradient can be fetched after backward without keeping the handle.
    pub fn bind(&self, slot: usize, data: &[S], shape: &[usize]) -> Result<Tensor<'_, S>> {
        let t = self.leaf_grad(data.to_vec(), shape)?;
        self.inner.borrow_mut().bindings.push((slot, t.id));
        Ok(t)
    }

    pub fn scalar(&self, v: S) -> Tensor<'_, S> {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    /// Gradient of a bound slot after backward; zeros if the slot never
    /// received any contribution.
    pub fn slot_grad(&self, slot: usize) -> Option<Vec<S>> {
        let inner = self.inner.borrow();
        let (_, id) = *inner.bindings.iter().find(|(s, _)| *s == slot)?;
        let node = &inner.nodes[id];
        Some(match &node.grad {
            Some(g) => g.clone(),
            None => vec![S::ZERO; node.data.len()],
        })
    }

    pub fn value(&self, t: Tensor<'_, S>) -> Vec<S> {
        self.inner.borrow().nodes[t.id].data.clone()
    }

    pub fn grad(&self, t: Tensor<'_, S>) -> Option<Vec<S>> {
        self.inner.borrow().nodes[t.id].grad.clone()
    }

    pub fn grad_or_zeros(&self, t: Tensor<'_, S>) -> Vec<S> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[t.id];
        match &node.grad {
            Some(g) => g.clone(),
            None => vec![S::ZERO; node.data.len()],
        }
    }

    /// Reverse sweep from a scalar loss. Every `requires_grad` leaf ends up
    /// with dLoss/dLeaf in its grad buffer. Branches whose adjoint is exactly
    /// zero are not propagated, so a loss term scaled by zero leaves the rest
    /// of the accumulation bitwise untouched.
    pub fn backward(&self, loss: Tensor<'_, S>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if numel(&inner.nodes[loss.id].shape) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: inner.nodes[loss.id].shape.clone(),
            });
        }
        inner.consumed = true;
        inner.nodes[loss.id].grad = Some(vec![S::ONE]);
        for idx in (0..inner.nodes.len()).rev() {
            let (before, rest) = inner.nodes.split_at_mut(idx);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let adj = match node.grad.take() {
                Some(a) => a,
                None => continue,
            };
            if adj.iter().all(|v| *v == S::ZERO) {
                node.grad = Some(adj);
                continue;
            }
            backward_step(node, &adj, before);
            node.grad = Some(adj);
        }
        Ok(())
    }
}

/// Accumulate `src` into the grad buffer of `nodes[id]`, allocating lazily.
fn accum<S: Scalar>(nodes: &mut [Node<S>], id: usize, src: &[S]) {
    let node = &mut nodes[id];
    if !node.requires_grad {
        return;
    }
    let g = node.grad.get_or_insert_with(|| vec![S::ZERO; node.data.len()]);
    for (gi, si) in g.iter_mut().zip(src) {
        *gi += *si;
    }
}

fn backward_step<S: Scalar>(node: &Node<S>, adj: &[S], nodes: &mut [Node<S>]) {
    match &node.op {
        Op::Leaf | Op::StopGrad => {}
        Op::Matmul { a, b } => {
            let (m, k) = {
                let sa = &nodes[*a].shape;
                (sa[0], sa[1])
            };
            let n = nodes[*b].shape[1];
            // dA[i,p] += sum_o adj[i,o] * B[p,o]
            if nodes[*a].requires_grad {
                let mut da = vec![S::ZERO; m * k];
                {
                    let bdat = &nodes[*b].data;
                    for i in 0..m {
                        let arow = &mut da[i * k..(i + 1) * k];
                        let adjrow = &adj[i * n..(i + 1) * n];
                        for (p, ap) in arow.iter_mut().enumerate() {
                            let brow = &bdat[p * n..(p + 1) * n];
                            let mut acc = S::ZERO;
                            for (x, y) in adjrow.iter().zip(brow) {
                                acc += *x * *y;
                            }
                            *ap += acc;
                        }
                    }
                }
                accum(nodes, *a, &da);
            }
            // dB[p,o] += sum_i A[i,p] * adj[i,o]
            if nodes[*b].requires_grad {
                let mut db = vec![S::ZERO; k * n];
                {
                    let adat = &nodes[*a].data;
                    for i in 0..m {
                        let adjrow = &adj[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = adat[i * k + p];
                            let dbrow = &mut db[p * n..(p + 1) * n];
                            for (d, x) in dbrow.iter_mut().zip(adjrow) {
                                *d += av * *x;
                            }
                        }
                    }
                }
                accum(nodes, *b, &db);
            }
        }
        Op::Add { a, b } => {
            binary_adjoint(nodes, *a, *b, &node.shape, adj, |_, _| S::ONE, |_, _| S::ONE);
        }
        Op::Sub { a, b } => {
            binary_adjoint(nodes, *a, *b, &node.shape, adj, |_, _| S::ONE, |_, _| -S::ONE);
        }
        Op::Mul { a, b } => {
            binary_adjoint(nodes, *a, *b, &node.shape, adj, |_, bv| bv, |av, _| av);
        }
        Op::Scale { a, c } => {
            let c = S::from_f64(*c);
            let da: Vec<S> = adj.iter().map(|g| *g * c).collect();
            accum(nodes, *a, &da);
        }
        Op::AddBias { x, b } => {
            accum(nodes, *x, adj);
            if nodes[*b].requires_grad {
                let d = nodes[*b].data.len();
                let mut db = vec![S::ZERO; d];
                for row in adj.chunks(d) {
                    for (g, v) in db.iter_mut().zip(row) {
                        *g += *v;
                    }
                }
                accum(nodes, *b, &db);
            }
        }
        Op::Gelu { a } => {
            let da: Vec<S> = nodes[*a]
                .data
                .iter()
                .zip(adj)
                .map(|(x, g)| gelu_grad(*x) * *g)
                .collect();
            accum(nodes, *a, &da);
        }
        Op::Exp { a } => {
            let da: Vec<S> = node.data.iter().zip(adj).map(|(y, g)| *y * *g).collect();
            accum(nodes, *a, &da);
        }
        Op::Ln { a } => {
            let da: Vec<S> = nodes[*a].data.iter().zip(adj).map(|(x, g)| *g / *x).collect();
            accum(nodes, *a, &da);
        }
        Op::SoftmaxRows { a } => {
            let (rows, n) = rows_cols(&node.shape);
            let mut da = vec![S::ZERO; rows * n];
            for r in 0..rows {
                let y = &node.data[r * n..(r + 1) * n];
                let g = &adj[r * n..(r + 1) * n];
                let dot: S = y.iter().zip(g).map(|(yi, gi)| *yi * *gi).sum();
                for ((d, yi), gi) in da[r * n..(r + 1) * n].iter_mut().zip(y).zip(g) {
                    *d = *yi * (*gi - dot);
                }
            }
            accum(nodes, *a, &da);
        }
        Op::LogsumexpRows { a } => {
            let n = *nodes[*a].shape.last().unwrap();
            let rows = nodes[*a].data.len() / n;
            let mut da = vec![S::ZERO; rows * n];
            for r in 0..rows {
                let x = &nodes[*a].data[r * n..(r + 1) * n];
                let lse = node.data[r];
                let g = adj[r];
                for (d, xi) in da[r * n..(r + 1) * n].iter_mut().zip(x) {
                    *d = (*xi - lse).exp() * g;
                }
            }
            accum(nodes, *a, &da);
        }
        Op::Layernorm { x, gain, bias, eps } => {
            layernorm_backward(nodes, *x, *gain, *bias, *eps, adj);
        }
        Op::IndexPermute { a, perm } => {
            let rest = nodes[*a].data.len() / perm.len();
            let mut da = vec![S::ZERO; nodes[*a].data.len()];
            for (j, &src) in perm.iter().enumerate() {
                for t in 0..rest {
                    da[src * rest + t] += adj[j * rest + t];
                }
            }
            accum(nodes, *a, &da);
        }
        Op::Reshape { a } => {
            accum(nodes, *a, adj);
        }
        Op::Transpose2 { a } => {
            let (m, n) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let mut da = vec![S::ZERO; m * n];
            for i in 0..n {
                for j in 0..m {
                    da[j * n + i] = adj[i * m + j];
                }
            }
            accum(nodes, *a, &da);
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].data.len();
                let slice = adj[offset..offset + len].to_vec();
                accum(nodes, p, &slice);
                offset += len;
            }
        }
        Op::SliceRows { a, start } => {
            let cols = nodes[*a].data.len() / nodes[*a].shape[0];
            let mut da = vec![S::ZERO; nodes[*a].data.len()];
            da[start * cols..start * cols + adj.len()].copy_from_slice(adj);
            accum(nodes, *a, &da);
        }
        Op::SliceCols { a, start } => {
            let (m, n) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let len = node.shape[1];
            let mut da = vec![S::ZERO; m * n];
            for i in 0..m {
                for j in 0..len {
                    da[i * n + start + j] = adj[i * len + j];
                }
            }
            accum(nodes, *a, &da);
        }
        Op::ConcatCols { parts } => {
            let m = node.shape[0];
            let total = node.shape[1];
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].shape[1];
                let mut dp = vec![S::ZERO; m * w];
                for i in 0..m {
                    for j in 0..w {
                        dp[i * w + j] = adj[i * total + offset + j];
                    }
                }
                accum(nodes, p, &dp);
                offset += w;
            }
        }
        Op::Gather { a, indices } => {
            let mut da = vec![S::ZERO; nodes[*a].data.len()];
            for (t, &src) in indices.iter().enumerate() {
                da[src] += adj[t];
            }
            accum(nodes, *a, &da);
        }
        Op::SumAll { a } => {
            let g = adj[0];
            let da = vec![g; nodes[*a].data.len()];
            accum(nodes, *a, &da);
        }
        Op::MeanAll { a } => {
            let n = nodes[*a].data.len();
            let g = adj[0] * (S::ONE / S::from_usize(n));
            let da = vec![g; n];
            accum(nodes, *a, &da);
        }
        Op::MeanRows { a } => {
            let d = node.data.len();
            let n = nodes[*a].shape[0];
            let inv = S::ONE / S::from_usize(n);
            let mut da = vec![S::ZERO; n * d];
            for i in 0..n {
                for j in 0..d {
                    da[i * d + j] = adj[j] * inv;
                }
            }
            accum(nodes, *a, &da);
        }
        Op::L2NormalizeRows { a } => {
            let (rows, d) = rows_cols(&node.shape);
            let mut da = vec![S::ZERO; rows * d];
            for r in 0..rows {
                let x = &nodes[*a].data[r * d..(r + 1) * d];
                let y = &node.data[r * d..(r + 1) * d];
                let g = &adj[r * d..(r + 1) * d];
                let mut sq = S::ZERO;
                for xi in x {
                    sq += *xi * *xi;
                }
                let norm = (sq + S::from_f64(L2_EPS)).sqrt();
                let dot: S = y.iter().zip(g).map(|(yi, gi)| *yi * *gi).sum();
                for ((dst, yi), gi) in da[r * d..(r + 1) * d].iter_mut().zip(y).zip(g) {
                    *dst = (*gi - *yi * dot) / norm;
                }
            }
            accum(nodes, *a, &da);
        }
        Op::StandardizeCols { a, eps } => {
            let (n, d) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let inv_n = S::ONE / S::from_usize(n);
            let mut da = vec![S::ZERO; n * d];
            for j in 0..d {
                let mut mean_g = S::ZERO;
                let mut mean_gy = S::ZERO;
                for i in 0..n {
                    let g = adj[i * d + j];
                    mean_g += g;
                    mean_gy += g * node.data[i * d + j];
                }
                mean_g *= inv_n;
                mean_gy *= inv_n;
                // recompute sigma from input
                let mut mu = S::ZERO;
                for i in 0..n {
                    mu += nodes[*a].data[i * d + j];
                }
                mu *= inv_n;
                let mut var = S::ZERO;
                for i in 0..n {
                    let c = nodes[*a].data[i * d + j] - mu;
                    var += c * c;
                }
                var *= inv_n;
                let sigma = (var + S::from_f64(*eps)).sqrt();
                for i in 0..n {
                    let g = adj[i * d + j];
                    let y = node.data[i * d + j];
                    da[i * d + j] = (g - mean_g - y * mean_gy) / sigma;
                }
            }
            accum(nodes, *a, &da);
        }
        Op::ResizeBilinear { a, h, w, h2, w2 } => {
            let c = nodes[*a].data.len() / (h * w);
            let wy = axis_weights(*h, *h2);
            let wx = axis_weights(*w, *w2);
            let mut da = vec![S::ZERO; nodes[*a].data.len()];
            for (oy, &(y0, y1, fy)) in wy.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in wx.iter().enumerate() {
                    let g = &adj[(oy * w2 + ox) * c..(oy * w2 + ox + 1) * c];
                    let w00 = S::from_f64((1.0 - fy) * (1.0 - fx));
                    let w01 = S::from_f64((1.0 - fy) * fx);
                    let w10 = S::from_f64(fy * (1.0 - fx));
                    let w11 = S::from_f64(fy * fx);
                    for (t, gv) in g.iter().enumerate() {
                        da[(y0 * w + x0) * c + t] += w00 * *gv;
                        da[(y0 * w + x1) * c + t] += w01 * *gv;
                        da[(y1 * w + x0) * c + t] += w10 * *gv;
                        da[(y1 * w + x1) * c + t] += w11 * *gv;
                    }
                }
            }
            accum(nodes, *a, &da);
        }
    }
}

/// Adjoint for elementwise binary ops that support scalar-vs-tensor operands.
fn binary_adjoint<S: Scalar>(
    nodes: &mut [Node<S>],
    a: usize,
    b: usize,
    out_shape: &[usize],
    adj: &[S],
    dfda: impl Fn(S, S) -> S,
    dfdb: impl Fn(S, S) -> S,
) {
    let n = numel(out_shape);
    let a_scalar = nodes[a].data.len() == 1 && n > 1;
    let b_scalar = nodes[b].data.len() == 1 && n > 1;
    if nodes[a].requires_grad {
        let mut da = vec![S::ZERO; nodes[a].data.len()];
        for i in 0..n {
            let av = nodes[a].data[if a_scalar { 0 } else { i }];
            let bv = nodes[b].data[if b_scalar { 0 } else { i }];
            let c = dfda(av, bv) * adj[i];
            if a_scalar {
                da[0] += c;
            } else {
                da[i] += c;
            }
        }
        accum(nodes, a, &da);
    }
    if nodes[b].requires_grad {
        let mut db = vec![S::ZERO; nodes[b].data.len()];
        for i in 0..n {
            let av = nodes[a].data[if a_scalar { 0 } else { i }];
            let bv = nodes[b].data[if b_scalar { 0 } else { i }];
            let c = dfdb(av, bv) * adj[i];
            if b_scalar {
                db[0] += c;
            } else {
                db[i] += c;
            }
        }
        accum(nodes, b, &db);
    }
}

fn layernorm_backward<S: Scalar>(
    nodes: &mut [Node<S>],
    x: usize,
    gain: usize,
    bias: usize,
    eps: f64,
    adj: &[S],
) {
    let d = *nodes[x].shape.last().unwrap();
    let rows = nodes[x].data.len() / d;
    let inv_d = S::ONE / S::from_usize(d);
    let eps = S::from_f64(eps);
    let mut dx = vec![S::ZERO; rows * d];
    let mut dgain = vec![S::ZERO; d];
    let mut dbias = vec![S::ZERO; d];
    for r in 0..rows {
        let xr = &nodes[x].data[r * d..(r + 1) * d];
        let g = &adj[r * d..(r + 1) * d];
        let mut mu = S::ZERO;
        for v in xr {
            mu += *v;
        }
        mu *= inv_d;
        let mut var = S::ZERO;
        for v in xr {
            let c = *v - mu;
            var += c * c;
        }
        var *= inv_d;
        let istd = S::ONE / (var + eps).sqrt();
        // xhat, gg = gain*adj, and its row statistics
        let mut mean_gg = S::ZERO;
        let mut mean_ggx = S::ZERO;
        for j in 0..d {
            let xhat = (xr[j] - mu) * istd;
            let gg = nodes[gain].data[j] * g[j];
            mean_gg += gg;
            mean_ggx += gg * xhat;
            dgain[j] += g[j] * xhat;
            dbias[j] += g[j];
        }
        mean_gg *= inv_d;
        mean_ggx *= inv_d;
        for j in 0..d {
            let xhat = (xr[j] - mu) * istd;
            let gg = nodes[gain].data[j] * g[j];
            dx[r * d + j] = (gg - mean_gg - xhat * mean_ggx) * istd;
        }
    }
    accum(nodes, x, &dx);
    accum(nodes, gain, &dgain);
    accum(nodes, bias, &dbias);
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;
/// Guards row normalization against exactly-zero vectors; far below any
/// reachable squared norm, so it never perturbs real data.
const L2_EPS: f64 = 1e-30;

fn gelu_value<S: Scalar>(x: S) -> S {
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    let half = S::from_f64(0.5);
    let inner = c0 * (x + c1 * x * x * x);
    half * x * (S::ONE + inner.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let inner = c0 * (x + c1 * x * x * x);
    let t = inner.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c0 * (S::ONE + three * c1 * x * x)
}

/// Per-output-axis source indices and fractional weight for the shared
/// bilinear resize: half-pixel centers, clamped to the edges
/// (align_corners = false). `out[i]` samples `(i + 0.5) * len / len2 - 0.5`.
pub fn axis_weights(len: usize, len2: usize) -> Vec<(usize, usize, f64)> {
    (0..len2)
        .map(|i| {
            let src = ((i as f64 + 0.5) * len as f64 / len2 as f64 - 0.5)
                .clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<'t, S: Scalar> Tensor<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    pub fn value(&self) -> Vec<S> {
        self.tape.value(*self)
    }

    pub fn item(&self) -> S {
        self.tape.inner.borrow().nodes[self.id].data[0]
    }

    fn with_inputs<R>(&self, f: impl FnOnce(&[Node<S>]) -> R) -> R {
        let inner = self.tape.inner.borrow();
        f(&inner.nodes)
    }

    fn unary(
        &self,
        shape: Vec<usize>,
        data: Vec<S>,
        op: Op,
    ) -> Tensor<'t, S> {
        let rg = self.tape.inner.borrow().nodes[self.id].requires_grad;
        self.tape.push(shape, data, rg, op)
    }

    pub fn matmul(&self, other: Tensor<'t, S>) -> Result<Tensor<'t, S>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = self.with_inputs(|nodes| {
            let a = &nodes[self.id].data;
            let b = &nodes[other.id].data;
            let mut out = vec![S::ZERO; m * n];
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, av) in arow.iter().enumerate() {
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += *av * *bv;
                    }
                }
            }
            out
        });
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            vec![m, n],
            data,
            rg,
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    fn binary_elementwise(
        &self,
        other: Tensor<'t, S>,
        op_name: &'static str,
        f: impl Fn(S, S) -> S,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Tensor<'t, S>> {
        let (sa, sb) = (self.shape(), other.shape());
        let (na, nb) = (numel(&sa), numel(&sb));
        let out_shape = if na == nb && sa == sb {
            sa.clone()
        } else if na == 1 {
            sb.clone()
        } else if nb == 1 {
            sa.clone()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: sa,
                rhs: sb,
            });
        };
        let n = numel(&out_shape);
        let data = self.with_inputs(|nodes| {
            let a = &nodes[self.id].data;
            let b = &nodes[other.id].data;
            (0..n)
                .map(|i| f(a[if na == 1 { 0 } else { i }], b[if nb == 1 { 0 } else { i }]))
                .collect()
        });
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out_shape, data, rg, make(self.id, other.id)))
    }

    pub fn add(&self, other: Tensor<'t, S>) -> Result<Tensor<'t, S>> {
        self.binary_elementwise(other, "add", |a, b| a + b, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, other: Tensor<'t, S>) -> Result<Tensor<'t, S>> {
        self.binary_elementwise(other, "sub", |a, b| a - b, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, other: Tensor<'t, S>) -> Result<Tensor<'t, S>> {
        self.binary_elementwise(other, "mul", |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    pub fn scale(&self, c: f64) -> Tensor<'t, S> {
        let cs = S::from_f64(c);
        let data: Vec<S> = self.with_inputs(|nodes| {
            nodes[self.id].data.iter().map(|v| *v * cs).collect()
        });
        self.unary(self.shape(), data, Op::Scale { a: self.id, c })
    }

    /// Adds a length-d bias vector to every row of an (…, d) tensor.
    pub fn add_bias(&self, bias: Tensor<'t, S>) -> Result<Tensor<'t, S>> {
        let s = self.shape();
        let bs = bias.shape();
        let d = *s.last().unwrap_or(&0);
        if bs.len() != 1 || bs[0] != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: s,
                rhs: bs,
            });
        }
        let data = self.with_inputs(|nodes| {
            let x = &nodes[self.id].data;
            let b = &nodes[bias.id].data;
            x.chunks(d)
                .flat_map(|row| row.iter().zip(b).map(|(xv, bv)| *xv + *bv))
                .collect()
        });
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            s,
            data,
            rg,
            Op::AddBias {
                x: self.id,
                b: bias.id,
            },
        ))
    }

    pub fn gelu(&self) -> Tensor<'t, S> {
        let data = self.with_inputs(|nodes| {
            nodes[self.id].data.iter().map(|x| gelu_value(*x)).collect()
        });
        self.unary(self.shape(), data, Op::Gelu { a: self.id })
    }

    pub fn exp(&self) -> Tensor<'t, S> {
        let data = self.with_inputs(|nodes| {
            nodes[self.id].data.iter().map(|x| x.exp()).collect()
        });
        self.unary(self.shape(), data, Op::Exp { a: self.id })
    }

    pub fn ln(&self) -> Result<Tensor<'t, S>> {
        let data: Vec<S> = self.value();
        for v in &data {
            if *v <= S::ZERO {
                return Err(TensorError::Domain {
                    op: "ln",
                    value: v.to_f64(),
                });
            }
        }
        let out = data.iter().map(|x| x.ln()).collect();
        Ok(self.unary(self.shape(), out, Op::Ln { a: self.id }))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<'t, S>> {
        let moved = self.move_axis_last(axis, "softmax")?;
        let out = moved.softmax_rows();
        moved_back(out, self, axis)
    }

    /// Numerically stabilized log-sum-exp along `axis`; the reduced axis is
    /// dropped from the shape.
    pub fn logsumexp(&self, axis: usize) -> Result<Tensor<'t, S>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(TensorError::BadShape {
                op: "logsumexp",
                shape: s,
                detail: format!("axis {axis} out of range"),
            });
        }
        if axis == s.len() - 1 {
            return Ok(self.logsumexp_rows());
        }
        let moved = self.move_axis_last(axis, "logsumexp")?;
        let reduced = moved.logsumexp_rows();
        // reduced shape is the moved shape minus its last axis, which equals
        // the original shape minus `axis` with remaining order preserved.
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        reduced.reshape(&out_shape)
    }

    fn softmax_rows(&self) -> Tensor<'t, S> {
        let s = self.shape();
        let (rows, n) = rows_cols(&s);
        let data = self.with_inputs(|nodes| {
            let x = &nodes[self.id].data;
            let mut out = vec![S::ZERO; rows * n];
            for r in 0..rows {
                let row = &x[r * n..(r + 1) * n];
                let mut mx = row[0];
                for v in row {
                    mx = mx.max(*v);
                }
                let mut sum = S::ZERO;
                for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                    *o = (*v - mx).exp();
                    sum += *o;
                }
                let inv = S::ONE / sum;
                for o in out[r * n..(r + 1) * n].iter_mut() {
                    *o *= inv;
                }
            }
            out
        });
        self.unary(s, data, Op::SoftmaxRows { a: self.id })
    }

    fn logsumexp_rows(&self) -> Tensor<'t, S> {
        let s = self.shape();
        let (rows, n) = rows_cols(&s);
        let data = self.with_inputs(|nodes| {
            let x = &nodes[self.id].data;
            let mut out = vec![S::ZERO; rows];
            for r in 0..rows {
                let row = &x[r * n..(r + 1) * n];
                let mut mx = row[0];
                for v in row {
                    mx = mx.max(*v);
                }
                let mut sum = S::ZERO;
                for v in row {
                    sum += (*v - mx).exp();
                }
                out[r] = mx + sum.ln();
            }
            out
        });
        let mut out_shape: Vec<usize> = s[..s.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.unary(out_shape, data, Op::LogsumexpRows { a: self.id })
    }

    fn move_axis_last(&self, axis: usize, op: &'static str) -> Result<Tensor<'t, S>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(TensorError::BadShape {
                op,
                shape: s,
                detail: format!("axis {axis} out of range"),
            });
        }
        if axis == s.len() - 1 {
            return Ok(*self);
        }
        // Gather-based axis move: build the flat index map once.
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.remove(axis);
        order.push(axis);
        let new_shape: Vec<usize> = order.iter().map(|&d| s[d]).collect();
        let strides = contiguous_strides(&s);
        let total = numel(&s);
        let mut indices = vec![0usize; total];
        let new_strides = contiguous_strides(&new_shape);
        for (flat, slot) in indices.iter_mut().enumerate() {
            // decode flat index in the new layout, re-encode in the old.
            let mut rem = flat;
            let mut src = 0;
            for (dim, ns) in new_strides.iter().enumerate() {
                let coord = rem / ns;
                rem %= ns;
                src += coord * strides[order[dim]];
            }
            *slot = src;
        }
        self.gather(&indices, &new_shape)
    }

    pub fn layernorm(
        &self,
        gain: Tensor<'t, S>,
        bias: Tensor<'t, S>,
        eps: f64,
    ) -> Result<Tensor<'t, S>> {
        let s = self.shape();
        let d = *s.last().unwrap_or(&0);
        if gain.shape() != vec![d] || bias.shape() != vec![d] {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                lhs: s,
                rhs: gain.shape(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Domain { op: "layernorm", value: eps });
        }
        let rows = numel(&s) / d;
        let data = self.with_inputs(|nodes| {
            let x = &nodes[self.id].data;
            let g = &nodes[gain.id].data;
            let b = &nodes[bias.id].data;
            let inv_d = S::ONE / S::from_usize(d);
            let epss = S::from_f64(eps);
            let mut out = vec![S::ZERO; rows * d];
            for r in 0..rows {
                let xr = &x[r * d..(r + 1) * d];
                let mut mu = S::ZERO;
                for v in xr {
                    mu += *v;
                }
                mu *= inv_d;
                let mut var = S::ZERO;
                for v in xr {
                    let c = *v - mu;
                    var += c * c;
                }
                var *= inv_d;
                let istd = S::ONE / (var + epss).sqrt();
                for j in 0..d {
                    out[r * d + j] = (xr[j] - mu) * istd * g[j] + b[j];
                }
            }
            out
        });
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            s,
            data,
            rg,
            Op::Layernorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
        ))
    }

    /// Permute the first axis: `out[j] = x[perm[j]]`. Exact; backward applies
    /// the inverse permutation.
    pub fn index_permute(&self, perm: &[usize]) -> Result<Tensor<'t, S>> {
        let s = self.shape();
        let n = s[0];
        if perm.len() != n {
            return Err(TensorError::InvalidPermutation {
                detail: format!("permutation length {} does not match axis size {n}", perm.len()),
            });
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || seen[p] {
                return Err(TensorError::InvalidPermutation {
                    detail: format!("index {p} repeated or out of range for axis size {n}"),
                });
            }
            seen[p] = true;
        }
        let rest = numel(&s) / n;
        let data = self.with_inputs(|nodes| {
            let x = &nodes[self.id].data;
            let mut out = vec![S::ZERO; x.len()];
            for (j, &src) in perm.iter().enumerate() {
                out[j * rest..(j + 1) * rest].copy_from_slice(&x[src * rest..(src + 1) * rest]);
            }
            out
        });
        Ok(self.unary(
            s,
            data,
            Op::IndexPermute {
                a: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'t, S>> {
        if numel(shape) != self.numel() {
            return Err(TensorError::BadShape {
                op: "reshape",
                shape: shape.to_vec(),
                detail: format!("cannot view {} elements as {shape:?}", self.numel()),
            });
        }
        let data = self.value();
        Ok(self.unary(shape.to_vec(), data, Op::Reshape { a: self.id }))
    }

    pub fn transpose2(&self) -> Result<Tensor<'t, S>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose2",
                shape: s,
                detail: "rank-2 only".into(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let data = self.with_inputs(|nodes| {
            let x = &nodes[self.id].data;
            let mut out = vec![S::ZERO; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = x[i * n + j];
                }
            }
            out
        });
        Ok(self.unary(vec![n, m], data, Op::Transpose2 { a: self.id }))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<'t, S>> {
        let s = self.shape();
        if start + len > s[0] {
            return Err(TensorError::BadShape {
                op: "slice_rows",
                shape: s,
                detail: format!("rows {start}..{} out of range", start + len),
            });
        }
        let cols = numel(&s) / s[0];
        let data = self.with_inputs(|nodes| {
            nodes[self.id].data[start * cols..(start + len) * cols].to_vec()
        });
        let mut out_shape = s.clone();
        out_shape[0] = len;
        Ok(self.unary(out_shape, data, Op::SliceRows { a: self.id, start }))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<'t, S>> {
        let s = self.shape();
        if s.len() != 2 || start + len > s[1] {
            return Err(TensorError::BadShape {
                op: "slice_cols",
                shape: s,
                detail: format!("cols {start}..{} out of range", start + len),
            });
        }
        let (m, n) = (s[0], s[1]);
        let data = self.with_inputs(|nodes| {
            let x = &nodes[self.id].data;
            let mut out = Vec::with_capacity(m * len);
            for i in 0..m {
                out.extend_from_slice(&x[i * n + start..i * n + start + len]);
            }
            out
        });
        Ok(self.unary(vec![m, len], data, Op::SliceCols { a: self.id, start }))
    }

    /// Arbitrary gather over the flattened input; duplicates allowed, backward
    /// scatter-adds in index order.
    pub fn gather(&self, indices: &[usize], out_shape: &[usize]) -> Result<Tensor<'t, S>> {
        if numel(out_shape) != indices.len() {
            return Err(TensorError::BadShape {
                op: "gather",
                shape: out_shape.to_vec(),
                detail: format!("{} indices cannot fill {out_shape:?}", indices.len()),
            });
        }
        let n = self.numel();
        for &i in indices {
            if i >= n {
                return Err(TensorError::BadShape {
                    op: "gather",
                    shape: out_shape.to_vec(),
                    detail: format!("index {i} out of range for {n} elements"),
                });
            }
        }
        let data = self.with_inputs(|nodes| {
            let x = &nodes[self.id].data;
            indices.iter().map(|&i| x[i]).collect()
        });
        Ok(self.unary(
            out_shape.to_vec(),
            data,
            Op::Gather {
                a: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn sum_all(&self) -> Tensor<'t, S> {
        let data = self.with_inputs(|nodes| {
            let mut acc = S::ZERO;
            for v in &nodes[self.id].data {
                acc += *v;
            }
            vec![acc]
        });
        self.unary(vec![1], data, Op::SumAll { a: self.id })
    }

    pub fn mean_all(&self) -> Tensor<'t, S> {
        let n = self.numel();
        let data = self.with_inputs(|nodes| {
            let mut acc = S::ZERO;
            for v in &nodes[self.id].data {
                acc += *v;
            }
            vec![acc * (S::ONE / S::from_usize(n))]
        });
        self.unary(vec![1], data, Op::MeanAll { a: self.id })
    }

    /// Mean over the first axis of an (n, d) tensor.
    pub fn mean_rows(&self) -> Result<Tensor<'t, S>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op: "mean_rows",
                shape: s,
                detail: "rank-2 only".into(),
            });
        }
        let (n, d) = (s[0], s[1]);
        let data = self.with_inputs(|nodes| {
            let x = &nodes[self.id].data;
            let inv = S::ONE / S::from_usize(n);
            let mut out = vec![S::ZERO; d];
            for row in x.chunks(d) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += *v;
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
            out
        });
        Ok(self.unary(vec![d], data, Op::MeanRows { a: self.id }))
    }

    /// Rows scaled to unit L2 norm (tiny epsilon inside the sqrt guards the
    /// all-zero row).
    pub fn l2_normalize_rows(&self) -> Tensor<'t, S> {
        let s = self.shape();
        let (rows, d) = rows_cols(&s);
        let data = self.with_inputs(|nodes| {
            let x = &nodes[self.id].data;
            let mut out = vec![S::ZERO; rows * d];
            for r in 0..rows {
                let xr = &x[r * d..(r + 1) * d];
                let mut sq = S::ZERO;
                for v in xr {
                    sq += *v * *v;
                }
                let inv = S::ONE / (sq + S::from_f64(L2_EPS)).sqrt();
                for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(xr) {
                    *o = *v * inv;
                }
            }
            out
        });
        self.unary(s, data, Op::L2NormalizeRows { a: self.id })
    }

    /// Per-column standardization of an (n, d) batch to zero mean and unit
    /// variance, epsilon-stabilized.
    pub fn standardize_cols(&self, eps: f64) -> Result<Tensor<'t, S>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op: "standardize_cols",
                shape: s,
                detail: "rank-2 only".into(),
            });
        }
        let (n, d) = (s[0], s[1]);
        let data = self.with_inputs(|nodes| {
            let x = &nodes[self.id].data;
            let inv_n = S::ONE / S::from_usize(n);
            let mut out = vec![S::ZERO; n * d];
            for j in 0..d {
                let mut mu = S::ZERO;
                for i in 0..n {
                    mu += x[i * d + j];
                }
                mu *= inv_n;
                let mut var = S::ZERO;
                for i in 0..n {
                    let c = x[i * d + j] - mu;
                    var += c * c;
                }
                var *= inv_n;
                let istd = S::ONE / (var + S::from_f64(eps)).sqrt();
                for i in 0..n {
                    out[i * d + j] = (x[i * d + j] - mu) * istd;
                }
            }
            out
        });
        Ok(self.unary(s, data, Op::StandardizeCols { a: self.id, eps }))
    }

    /// Shared bilinear resize of an (h, w, c)-shaped tensor (stored as
    /// [h*w, c] or [h, w, c]) to (h2, w2, c). When the target equals the
    /// source the input is passed through untouched.
    pub fn resize_bilinear(
        &self,
        h: usize,
        w: usize,
        h2: usize,
        w2: usize,
    ) -> Result<Tensor<'t, S>> {
        let n = self.numel();
        if h * w == 0 || n % (h * w) != 0 {
            return Err(TensorError::BadShape {
                op: "resize_bilinear",
                shape: self.shape(),
                detail: format!("numel {n} not divisible by grid {h}x{w}"),
            });
        }
        let c = n / (h * w);
        if h2 == h && w2 == w {
            let data = self.value();
            return Ok(self.unary(vec![h2 * w2, c], data, Op::Reshape { a: self.id }));
        }
        let wy = axis_weights(h, h2);
        let wx = axis_weights(w, w2);
        let data = self.with_inputs(|nodes| {
            let x = &nodes[self.id].data;
            let mut out = vec![S::ZERO; h2 * w2 * c];
            for (oy, &(y0, y1, fy)) in wy.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in wx.iter().enumerate() {
                    let w00 = S::from_f64((1.0 - fy) * (1.0 - fx));
                    let w01 = S::from_f64((1.0 - fy) * fx);
                    let w10 = S::from_f64(fy * (1.0 - fx));
                    let w11 = S::from_f64(fy * fx);
                    let dst = &mut out[(oy * w2 + ox) * c..(oy * w2 + ox + 1) * c];
                    for (t, o) in dst.iter_mut().enumerate() {
                        *o = w00 * x[(y0 * w + x0) * c + t]
                            + w01 * x[(y0 * w + x1) * c + t]
                            + w10 * x[(y1 * w + x0) * c + t]
                            + w11 * x[(y1 * w + x1) * c + t];
                    }
                }
            }
            out
        });
        Ok(self.unary(
            vec![h2 * w2, c],
            data,
            Op::ResizeBilinear {
                a: self.id,
                h,
                w,
                h2,
                w2,
            },
        ))
    }

    /// Forward identity that blocks gradient flow.
    pub fn stop_grad(&self) -> Tensor<'t, S> {
        let data = self.value();
        self.tape.push(self.shape(), data, false, Op::StopGrad)
    }
}

/// Stack tensors along the first axis.
pub fn concat_rows<'t, S: Scalar>(parts: &[Tensor<'t, S>]) -> Result<Tensor<'t, S>> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let first = parts[0].shape();
    let tail = &first[1..];
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let s = p.shape();
        if &s[1..] != tail {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: first,
                rhs: s,
            });
        }
        rows += s[0];
        data.extend(p.value());
    }
    let mut shape = vec![rows];
    shape.extend_from_slice(tail);
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(tape.push(
        shape,
        data,
        rg,
        Op::ConcatRows {
            parts: parts.iter().map(|p| p.id).collect(),
        },
    ))
}

/// Stack rank-2 tensors along the column axis.
pub fn concat_cols<'t, S: Scalar>(parts: &[Tensor<'t, S>]) -> Result<Tensor<'t, S>> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let m = parts[0].shape()[0];
    let mut total = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != 2 || s[0] != m {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: parts[0].shape(),
                rhs: s,
            });
        }
        total += s[1];
    }
    let values: Vec<(Vec<S>, usize)> = parts.iter().map(|p| (p.value(), p.shape()[1])).collect();
    let mut data = vec![S::ZERO; m * total];
    for i in 0..m {
        let mut off = 0;
        for (v, w) in &values {
            data[i * total + off..i * total + off + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            off += w;
        }
    }
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(tape.push(
        vec![m, total],
        data,
        rg,
        Op::ConcatCols {
            parts: parts.iter().map(|p| p.id).collect(),
        },
    ))
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn moved_back<'t, S: Scalar>(
    moved_out: Tensor<'t, S>,
    original: &Tensor<'t, S>,
    axis: usize,
) -> Result<Tensor<'t, S>> {
    let s = original.shape();
    if axis == s.len() - 1 {
        return Ok(moved_out);
    }
    // Inverse of the move-axis-last gather.
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.remove(axis);
    order.push(axis);
    let new_shape: Vec<usize> = order.iter().map(|&d| s[d]).collect();
    let new_strides = contiguous_strides(&new_shape);
    let strides = contiguous_strides(&s);
    let total = numel(&s);
    let mut indices = vec![0usize; total];
    for flat in 0..total {
        // decode in the original layout, encode in the moved layout
        let mut rem = flat;
        let mut src = 0;
        for (dim, st) in strides.iter().enumerate() {
            let coord = rem / st;
            rem %= st;
            let pos_in_new = order.iter().position(|&o| o == dim).unwrap();
            src += coord * new_strides[pos_in_new];
        }
        indices[flat] = src;
    }
    moved_out.gather(&indices, &s)
}
