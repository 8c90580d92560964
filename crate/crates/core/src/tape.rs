//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every differentiable operation is a method on [`Tape`]. The tape records
//! the operation kind, its input node ids, and the forward value; node ids
//! referenced as inputs always precede the referencing node, so [`Tape::backward`]
//! is a single reverse sweep accumulating chain-rule contributions.
//!
//! A tape is confined to one thread and is meant to live for a single
//! training step: build the graph, call `backward`, drop the tape.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Mask, Tensor, TensorError};

/// Identifies a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

static TAPE_IDS: AtomicU64 = AtomicU64::new(0);

/// Element-wise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

/// Supported training losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Bce,
}

/// Predictions at or beyond the BCE clamp boundary raise a domain error.
const BCE_CLAMP: f64 = 1e-12;

enum Op {
    Leaf,
    Constant,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Activation { x: usize, kind: Activation },
    SoftmaxLast { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatLast { parts: Vec<usize> },
    SliceLast { x: usize, start: usize, len: usize },
    ConcatRows { parts: Vec<usize> },
    SliceRows { x: usize, start: usize },
    RepeatRows { x: usize },
    MaskedFill { x: usize, mask: Mask },
    Dropout { x: usize, keep: Vec<f64> },
    Sum { x: usize },
    Loss { pred: usize, target: usize, kind: LossKind },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of differentiable operations.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Tensor {
        let index = self.nodes.len();
        let tracked = value.with_node(NodeId { tape: self.id, index });
        self.nodes.push(Node {
            op,
            value: tracked.clone(),
        });
        tracked
    }

    /// Registers a tensor the graph should differentiate with respect to.
    pub fn leaf(&mut self, value: Tensor) -> Tensor {
        self.push(Op::Leaf, value.detached())
    }

    /// Registers a tensor that participates in the graph without being a
    /// differentiation target (targets, masks, fixed encodings).
    pub fn constant(&mut self, value: Tensor) -> Tensor {
        self.push(Op::Constant, value.detached())
    }

    /// Resolves a tensor to a node index, auto-registering untracked inputs
    /// as constants.
    fn input(&mut self, t: &Tensor, op: &'static str) -> Result<usize, TensorError> {
        match t.node() {
            Some(id) if id.tape == self.id => Ok(id.index),
            Some(_) => Err(TensorError::ForeignTape { op }),
            None => {
                let c = self.constant(t.clone());
                Ok(c.node().expect("constant was just pushed").index)
            }
        }
    }

    fn value(&self, index: usize) -> &Tensor {
        &self.nodes[index].value
    }

    // ── element-wise ───────────────────────────────────────────────────

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let v = a.zip(b, "add", |x, y| x + y)?;
        let (ai, bi) = (self.input(a, "add")?, self.input(b, "add")?);
        Ok(self.push(Op::Add { a: ai, b: bi }, v))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let v = a.zip(b, "sub", |x, y| x - y)?;
        let (ai, bi) = (self.input(a, "sub")?, self.input(b, "sub")?);
        Ok(self.push(Op::Sub { a: ai, b: bi }, v))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let v = a.zip(b, "mul", |x, y| x * y)?;
        let (ai, bi) = (self.input(a, "mul")?, self.input(b, "mul")?);
        Ok(self.push(Op::Mul { a: ai, b: bi }, v))
    }

    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        let v = x.map(|e| e * c);
        let xi = self.input(x, "scale")?;
        Ok(self.push(Op::Scale { x: xi, c }, v))
    }

    pub fn activation(&mut self, x: &Tensor, kind: Activation) -> Result<Tensor, TensorError> {
        let v = match kind {
            Activation::Relu => x.map(|e| if e > 0.0 { e } else { 0.0 }),
            Activation::Sigmoid => x.map(|e| 1.0 / (1.0 + (-e).exp())),
            Activation::Tanh => x.map(f64::tanh),
        };
        let xi = self.input(x, "activation")?;
        Ok(self.push(Op::Activation { x: xi, kind }, v))
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        self.activation(x, Activation::Tanh)
    }

    // ── linear algebra ─────────────────────────────────────────────────

    /// Standard matrix product `[m×k]·[k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = a.dims2("matmul")?;
        let (kb, n) = b.dims2("matmul")?;
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let v = matmul_value(a.data(), b.data(), m, k, n);
        let v = Tensor::from_vec(vec![m, n], v)?;
        let (ai, bi) = (self.input(a, "matmul")?, self.input(b, "matmul")?);
        Ok(self.push(Op::Matmul { a: ai, b: bi }, v))
    }

    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let (r, c) = x.dims2("transpose")?;
        let v = Tensor::from_vec(vec![c, r], transpose_value(x.data(), r, c))?;
        let xi = self.input(x, "transpose")?;
        Ok(self.push(Op::Transpose { x: xi }, v))
    }

    // ── shape surgery ──────────────────────────────────────────────────

    /// Concatenates along the last axis; parts must agree on every other extent.
    pub fn concat_lastdim(&mut self, parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_lastdim",
                msg: "no parts given".into(),
            });
        }
        let lead = &parts[0].shape()[..parts[0].rank() - 1];
        for p in parts {
            if &p.shape()[..p.rank() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_lastdim",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let slices: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.last_extent()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(slices * total);
        for s in 0..slices {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[s * w..(s + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let v = Tensor::from_vec(shape, data)?;
        let ids = parts
            .iter()
            .map(|p| self.input(p, "concat_lastdim"))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.push(Op::ConcatLast { parts: ids }, v))
    }

    /// Exact inverse of [`Tape::concat_lastdim`] for the given sizes.
    pub fn split_lastdim(&mut self, x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>, TensorError> {
        let width = x.last_extent();
        if sizes.iter().sum::<usize>() != width || sizes.iter().any(|&s| s == 0) {
            return Err(TensorError::Invalid {
                op: "split_lastdim",
                msg: format!("sizes {sizes:?} do not partition last extent {width}"),
            });
        }
        let xi = self.input(x, "split_lastdim")?;
        let lead = &x.shape()[..x.rank() - 1];
        let slices: usize = lead.iter().product();
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            let mut data = Vec::with_capacity(slices * len);
            for s in 0..slices {
                let row = &x.data()[s * width..(s + 1) * width];
                data.extend_from_slice(&row[start..start + len]);
            }
            let mut shape = lead.to_vec();
            shape.push(len);
            let v = Tensor::from_vec(shape, data)?;
            out.push(self.push(Op::SliceLast { x: xi, start, len }, v));
            start += len;
        }
        Ok(out)
    }

    /// Stacks rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                msg: "no parts given".into(),
            });
        }
        let (_, cols) = parts[0].dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = p.dims2("concat_rows")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(p.data());
        }
        let v = Tensor::from_vec(vec![rows, cols], data)?;
        let ids = parts
            .iter()
            .map(|p| self.input(p, "concat_rows"))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.push(Op::ConcatRows { parts: ids }, v))
    }

    /// Rows `start..start + len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let v = x.rows_range(start, len)?;
        let xi = self.input(x, "slice_rows")?;
        Ok(self.push(Op::SliceRows { x: xi, start }, v))
    }

    /// Tiles a rank-1 vector into `copies` identical rows (bias broadcast).
    pub fn repeat_rows(&mut self, x: &Tensor, copies: usize) -> Result<Tensor, TensorError> {
        if x.rank() != 1 {
            return Err(TensorError::WrongRank {
                op: "repeat_rows",
                rank: 1,
                shape: x.shape().to_vec(),
            });
        }
        if copies == 0 {
            return Err(TensorError::Invalid {
                op: "repeat_rows",
                msg: "copies must be positive".into(),
            });
        }
        let d = x.numel();
        let mut data = Vec::with_capacity(copies * d);
        for _ in 0..copies {
            data.extend_from_slice(x.data());
        }
        let v = Tensor::from_vec(vec![copies, d], data)?;
        let xi = self.input(x, "repeat_rows")?;
        Ok(self.push(Op::RepeatRows { x: xi }, v))
    }

    // ── attention and normalization primitives ─────────────────────────

    /// Softmax along the last axis, stabilised by subtracting the row max.
    pub fn softmax_lastdim(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let d = x.last_extent();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        let v = Tensor::from_vec(x.shape().to_vec(), data)?;
        let xi = self.input(x, "softmax_lastdim")?;
        Ok(self.push(Op::SoftmaxLast { x: xi }, v))
    }

    /// Per-slice standardization over the last axis with learned scale/shift.
    /// Uses population variance and puts `eps` inside the square root.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor, TensorError> {
        let d = x.last_extent();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let slices = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; slices];
        let mut out = vec![0.0; x.numel()];
        for s in 0..slices {
            let row = &x.data()[s * d..(s + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[s] = istd;
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat[s * d + j] = h;
                out[s * d + j] = h * gamma.data()[j] + beta.data()[j];
            }
        }
        let v = Tensor::from_vec(x.shape().to_vec(), out)?;
        let xi = self.input(x, "layer_norm")?;
        let gi = self.input(gamma, "layer_norm")?;
        let bi = self.input(beta, "layer_norm")?;
        Ok(self.push(
            Op::LayerNorm { x: xi, gamma: gi, beta: bi, xhat, inv_std },
            v,
        ))
    }

    /// Replaces masked positions with `value`; gradient is zero through them.
    pub fn masked_fill(&mut self, x: &Tensor, mask: &Mask, value: f64) -> Result<Tensor, TensorError> {
        if mask.shape() != x.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: x.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let data = x
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&e, &m)| if m { value } else { e })
            .collect();
        let v = Tensor::from_vec(x.shape().to_vec(), data)?;
        let xi = self.input(x, "masked_fill")?;
        Ok(self.push(Op::MaskedFill { x: xi, mask: mask.clone() }, v))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`.
    pub fn dropout(&mut self, x: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate must be in [0, 1), got {p}"),
            });
        }
        let gain = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { gain })
            .collect();
        let data = x.data().iter().zip(&keep).map(|(&e, &k)| e * k).collect();
        let v = Tensor::from_vec(x.shape().to_vec(), data)?;
        let xi = self.input(x, "dropout")?;
        Ok(self.push(Op::Dropout { x: xi, keep }, v))
    }

    // ── reductions and losses ──────────────────────────────────────────

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let v = Tensor::scalar(x.data().iter().sum());
        let xi = self.input(x, "sum")?;
        Ok(self.push(Op::Sum { x: xi }, v))
    }

    /// Mean squared error or mean binary cross-entropy over equal shapes.
    pub fn loss(&mut self, pred: &Tensor, target: &Tensor, kind: LossKind) -> Result<Tensor, TensorError> {
        if pred.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "loss",
                lhs: pred.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = pred.numel() as f64;
        let value = match kind {
            LossKind::Mse => {
                pred.data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| (p - t) * (p - t))
                    .sum::<f64>()
                    / n
            }
            LossKind::Bce => {
                let mut acc = 0.0;
                for (&p, &t) in pred.data().iter().zip(target.data()) {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(TensorError::BceDomain { value: p });
                    }
                    let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    acc -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
                }
                acc / n
            }
        };
        let v = Tensor::scalar(value);
        let pi = self.input(pred, "loss")?;
        let ti = self.input(target, "loss")?;
        Ok(self.push(Op::Loss { pred: pi, target: ti, kind }, v))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Stored forward values are never
    /// mutated; calling this twice yields identical gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<GradientMap, TensorError> {
        let id = loss.node().ok_or(TensorError::NotOnTape { op: "backward" })?;
        if id.tape != self.id {
            return Err(TensorError::ForeignTape { op: "backward" });
        }
        if !loss.is_scalar() {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: loss.shape().to_vec(),
            });
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.numel()])
            .collect();
        grads[id.index][0] = 1.0;

        for i in (0..=id.index).rev() {
            let (before, rest) = grads.split_at_mut(i);
            let g = rest[0].as_slice();
            if g.iter().all(|&e| e == 0.0) {
                continue;
            }
            self.accumulate(i, g, before);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                Tensor::from_vec(n.value.shape().to_vec(), g).expect("gradient shape matches value")
            })
            .collect();
        Ok(GradientMap { tape: self.id, grads })
    }

    /// Adds this node's chain-rule contribution to its inputs' gradients.
    fn accumulate(&self, index: usize, g: &[f64], before: &mut [Vec<f64>]) {
        match &self.nodes[index].op {
            Op::Leaf | Op::Constant => {}
            Op::Add { a, b } => {
                axpy(&mut before[*a], g, 1.0);
                axpy(&mut before[*b], g, 1.0);
            }
            Op::Sub { a, b } => {
                axpy(&mut before[*a], g, 1.0);
                axpy(&mut before[*b], g, -1.0);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                for (i, &gi) in g.iter().enumerate() {
                    before[*a][i] += gi * bv[i];
                    before[*b][i] += gi * av[i];
                }
            }
            Op::Scale { x, c } => axpy(&mut before[*x], g, *c),
            Op::Matmul { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA[i,l] += sum_j g[i,j] * B[l,j]
                let da = &mut before[*a];
                for i in 0..m {
                    for l in 0..k {
                        let mut acc = 0.0;
                        let grow = &g[i * n..(i + 1) * n];
                        let brow = &bv[l * n..(l + 1) * n];
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        da[i * k + l] += acc;
                    }
                }
                // dB[l,j] += sum_i A[i,l] * g[i,j]
                let db = &mut before[*b];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for l in 0..k {
                        let ail = av[i * k + l];
                        if ail == 0.0 {
                            continue;
                        }
                        let drow = &mut db[l * n..(l + 1) * n];
                        for j in 0..n {
                            drow[j] += ail * grow[j];
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let dx = &mut before[*x];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Activation { x, kind } => {
                let dx = &mut before[*x];
                match kind {
                    Activation::Relu => {
                        let xv = self.value(*x).data();
                        for (i, &gi) in g.iter().enumerate() {
                            if xv[i] > 0.0 {
                                dx[i] += gi;
                            }
                        }
                    }
                    Activation::Sigmoid => {
                        let yv = self.nodes[index].value.data();
                        for (i, &gi) in g.iter().enumerate() {
                            dx[i] += gi * yv[i] * (1.0 - yv[i]);
                        }
                    }
                    Activation::Tanh => {
                        let yv = self.nodes[index].value.data();
                        for (i, &gi) in g.iter().enumerate() {
                            dx[i] += gi * (1.0 - yv[i] * yv[i]);
                        }
                    }
                }
            }
            Op::SoftmaxLast { x } => {
                let y = self.nodes[index].value.data();
                let d = self.nodes[index].value.last_extent();
                let dx = &mut before[*x];
                for s in 0..y.len() / d {
                    let (ys, gs) = (&y[s * d..(s + 1) * d], &g[s * d..(s + 1) * d]);
                    let dot: f64 = ys.iter().zip(gs).map(|(&yj, &gj)| yj * gj).sum();
                    for j in 0..d {
                        dx[s * d + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.value(*gamma).numel();
                let gv = self.value(*gamma).data().to_vec();
                for s in 0..inv_std.len() {
                    let gs = &g[s * d..(s + 1) * d];
                    let hs = &xhat[s * d..(s + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dh = gs[j] * gv[j];
                        m1 += dh;
                        m2 += dh * hs[j];
                        before[*gamma][j] += gs[j] * hs[j];
                        before[*beta][j] += gs[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dh = gs[j] * gv[j];
                        before[*x][s * d + j] += inv_std[s] * (dh - m1 - hs[j] * m2);
                    }
                }
            }
            Op::ConcatLast { parts } => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_extent()).collect();
                let total: usize = widths.iter().sum();
                let slices = g.len() / total;
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let dp = &mut before[p];
                    for s in 0..slices {
                        for j in 0..w {
                            dp[s * w + j] += g[s * total + off + j];
                        }
                    }
                    off += w;
                }
            }
            Op::SliceLast { x, start, len } => {
                let width = self.value(*x).last_extent();
                let dx = &mut before[*x];
                for s in 0..g.len() / len {
                    for j in 0..*len {
                        dx[s * width + start + j] += g[s * len + j];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    axpy(&mut before[p], &g[off..off + n], 1.0);
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = self.value(*x).shape()[1];
                axpy_at(&mut before[*x], start * cols, g);
            }
            Op::RepeatRows { x } => {
                let d = self.value(*x).numel();
                let dx = &mut before[*x];
                for (i, &gi) in g.iter().enumerate() {
                    dx[i % d] += gi;
                }
            }
            Op::MaskedFill { x, mask } => {
                let dx = &mut before[*x];
                for (i, (&gi, &m)) in g.iter().zip(mask.data()).enumerate() {
                    if !m {
                        dx[i] += gi;
                    }
                }
            }
            Op::Dropout { x, keep } => {
                let dx = &mut before[*x];
                for (i, &gi) in g.iter().enumerate() {
                    dx[i] += gi * keep[i];
                }
            }
            Op::Sum { x } => {
                let dx = &mut before[*x];
                for e in dx.iter_mut() {
                    *e += g[0];
                }
            }
            Op::Loss { pred, target, kind } => {
                let (pv, tv) = (self.value(*pred).data(), self.value(*target).data());
                let n = pv.len() as f64;
                let g0 = g[0];
                match kind {
                    LossKind::Mse => {
                        for i in 0..pv.len() {
                            let d = 2.0 * (pv[i] - tv[i]) / n;
                            before[*pred][i] += g0 * d;
                            before[*target][i] -= g0 * d;
                        }
                    }
                    LossKind::Bce => {
                        for i in 0..pv.len() {
                            let pc = pv[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                            before[*pred][i] += g0 * (pc - tv[i]) / (pc * (1.0 - pc)) / n;
                            before[*target][i] += g0 * ((1.0 - pc).ln() - pc.ln()) / n;
                        }
                    }
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn axpy_at(dst: &mut [f64], offset: usize, src: &[f64]) {
    for (d, &s) in dst[offset..offset + src.len()].iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn matmul_value(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += ail * brow[j];
            }
        }
    }
    out
}

fn transpose_value(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Gradients produced by one backward sweep, indexed by tape node.
#[derive(Debug)]
pub struct GradientMap {
    tape: u64,
    grads: Vec<Tensor>,
}

impl GradientMap {
    /// Gradient of the loss with respect to a tracked tensor.
    pub fn grad(&self, t: &Tensor) -> Result<&Tensor, TensorError> {
        let id = t.node().ok_or(TensorError::NotOnTape { op: "grad" })?;
        self.grad_by_id(id)
    }

    pub fn grad_by_id(&self, id: NodeId) -> Result<&Tensor, TensorError> {
        if id.tape != self.tape {
            return Err(TensorError::ForeignTape { op: "grad" });
        }
        Ok(&self.grads[id.index])
    }
}
