//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass. Every operation appends a node holding
//! its output value and whatever it needs for the backward sweep; [`Var`] is an
//! index into that tape. Calling [`Graph::backward`] walks the tape once in
//! reverse. The graph is meant to be dropped afterwards; a second backward on
//! the same tape is rejected.
//!
//! Parameters enter the tape through [`Graph::param`], which copies the current
//! value out of a [`ParamStore`]. [`Graph::backward_into`] adds the resulting
//! gradients back into the store, so several micro-batch graphs can accumulate
//! into one optimizer step.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{matmul_into, softmax_row, axis_strides, transpose, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Rows routed to one expert and the node holding that expert's outputs.
#[derive(Clone, Debug)]
pub struct ExpertPart {
    pub output: Var,
    pub expert: usize,
    /// Token row for each output row.
    pub rows: Vec<usize>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Softmax { x: Var, axis: usize },
    Sigmoid(Var),
    Gelu(Var),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, seq_len: usize, probs: Vec<T> },
    GatherRows { src: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    RoutingWeights { scores: Var, selected: Vec<Vec<usize>> },
    Combine { weights: Var, parts: Vec<ExpertPart> },
    BalanceLoss { probs: Var, frac: Vec<f64>, coeff: f64 },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Softmax { .. } => "softmax",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Silu(..) => "silu",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Attention { .. } => "attention",
            Op::GatherRows { .. } => "gather_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::RoutingWeights { .. } => "routing_weights",
            Op::Combine { .. } => "combine",
            Op::BalanceLoss { .. } => "balance_loss",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
    differentiated: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const RMS_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// A differentiable input that is not a stored parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Brings a stored parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let mut value = store.value(id).clone();
        value.set_grad(None);
        let v = self.push_unchecked(value, Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        // finite inputs must give finite outputs; checked in debug builds only
        if cfg!(debug_assertions)
            && !value.all_finite()
            && inputs.iter().all(|v| self.nodes[v.0].value.all_finite())
        {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| v * c).collect())?;
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        self.push(Tensor::scalar(T::of(s)), Op::Sum(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        self.push(out, Op::Softmax { x, axis }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Tanh-approximated GeLU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| {
            let u = GELU_C * (v + 0.044715 * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor<T> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| T::of(f(v.f64()))).collect();
        Tensor::new(vx.shape().to_vec(), data).expect("same length")
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gain));
        let cols = vx.cols();
        if vg.len() != cols {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); vx.len()];
        let mut inv_rms = Vec::with_capacity(vx.rows());
        for (r, (row, o)) in vx.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let ms = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            let inv_t = T::of(inv);
            for ((o, &v), &g) in o.iter_mut().zip(row).zip(vg.data()) {
                *o = v * inv_t * g;
            }
            debug_assert!(r < vx.rows());
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    /// Causal multi-head self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[B·seq_len × d]`; each block of `seq_len` rows is one
    /// sequence and only attends within itself.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, d) = (self.value(q).rows(), self.value(q).cols());
        if heads == 0 || d % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Shape {
                op: "attention",
                lhs: vec![rows, d],
                rhs: vec![heads, seq_len],
            });
        }
        let batch = rows / seq_len;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * heads * seq_len * seq_len];
        let mut scores = vec![T::zero(); seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let qi = &qd[(b * seq_len + i) * d + h * dh..][..dh];
                    for (j, s) in scores[..=i].iter_mut().enumerate() {
                        let kj = &kd[(b * seq_len + j) * d + h * dh..][..dh];
                        *s = T::of(dot(qi, kj) * scale);
                    }
                    softmax_row(&mut scores[..=i]);
                    probs[pbase + i * seq_len..][..=i].copy_from_slice(&scores[..=i]);
                    let oi = &mut out[(b * seq_len + i) * d + h * dh..][..dh];
                    for (j, &p) in scores[..=i].iter().enumerate() {
                        let vj = &vd[(b * seq_len + j) * d + h * dh..][..dh];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Selects rows of a 2-D tensor; used for embeddings and token dispatch.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let vs = self.value(src);
        let (n, cols) = (vs.rows(), vs.cols());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "row",
                    index: r,
                    bound: n,
                });
            }
            data.extend_from_slice(vs.row(r));
        }
        let out = Tensor::new(vec![rows.len(), cols], data)?;
        self.push(
            out,
            Op::GatherRows {
                src,
                rows: rows.to_vec(),
            },
            &[src],
        )
    }

    /// Mean next-token cross-entropy, returned as a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, vocab) = (vl.rows(), vl.cols());
        if targets.len() != rows || rows == 0 {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vl.data().to_vec();
        let mut total = 0.0f64;
        for (row, (&t, p)) in vl.data().chunks(vocab).zip(targets.iter().zip(probs.chunks_mut(vocab))) {
            if t >= vocab {
                return Err(Error::Index {
                    what: "target",
                    index: t,
                    bound: vocab,
                });
            }
            total += log_sum_exp(row) - row[t].f64();
            softmax_row(p);
        }
        let out = Tensor::scalar(T::of(total / rows as f64));
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Dense `[T×N]` mixture weights: each token's selected scores divided by
    /// their sum, zero elsewhere.
    pub fn routing_weights(&mut self, scores: Var, selected: &[Vec<usize>]) -> Result<Var> {
        let vs = self.value(scores);
        let (rows, n) = (vs.rows(), vs.cols());
        if selected.len() != rows {
            return Err(Error::Shape {
                op: "routing_weights",
                lhs: vs.shape().to_vec(),
                rhs: vec![selected.len()],
            });
        }
        let mut w = vec![T::zero(); rows * n];
        for (t, sel) in selected.iter().enumerate() {
            let row = vs.row(t);
            let mut denom = 0.0f64;
            for &i in sel {
                if i >= n {
                    return Err(Error::Index {
                        what: "expert",
                        index: i,
                        bound: n,
                    });
                }
                denom += row[i].f64();
            }
            for &i in sel {
                w[t * n + i] = T::of(row[i].f64() / denom);
            }
        }
        let out = Tensor::new(vec![rows, n], w)?;
        self.push(
            out,
            Op::RoutingWeights {
                scores,
                selected: selected.to_vec(),
            },
            &[scores],
        )
    }

    /// Scatters weighted expert outputs back to token rows:
    /// `y[t] = Σ_parts weights[t, expert] · output[r]` for each routed row `r → t`.
    pub fn combine(&mut self, weights: Var, parts: Vec<ExpertPart>, dim: usize) -> Result<Var> {
        let vw = self.value(weights);
        let (rows, n) = (vw.rows(), vw.cols());
        let mut y = vec![T::zero(); rows * dim];
        let mut inputs = vec![weights];
        for part in &parts {
            let vo = self.value(part.output);
            if vo.cols() != dim || vo.rows() != part.rows.len() || part.expert >= n {
                return Err(Error::Shape {
                    op: "combine",
                    lhs: vo.shape().to_vec(),
                    rhs: vec![part.rows.len(), dim],
                });
            }
            for (r, &t) in part.rows.iter().enumerate() {
                if t >= rows {
                    return Err(Error::Index {
                        what: "token",
                        index: t,
                        bound: rows,
                    });
                }
                let w = vw.data()[t * n + part.expert];
                for (yv, &o) in y[t * dim..(t + 1) * dim].iter_mut().zip(vo.row(r)) {
                    *yv += w * o;
                }
            }
            inputs.push(part.output);
        }
        let out = Tensor::new(vec![rows, dim], y)?;
        self.push(out, Op::Combine { weights, parts }, &inputs)
    }

    /// Load-balancing regularizer `coeff · N · Σ_i f_i · P_i`, where `frac` holds
    /// the (non-differentiable) routed fractions `f_i` and `P_i` is the mean of
    /// column `i` of `probs`.
    pub fn balance_loss(&mut self, probs: Var, frac: &[f64], coeff: f64) -> Result<Var> {
        let vp = self.value(probs);
        let (rows, n) = (vp.rows(), vp.cols());
        if frac.len() != n {
            return Err(Error::Shape {
                op: "balance_loss",
                lhs: vp.shape().to_vec(),
                rhs: vec![frac.len()],
            });
        }
        let value = if coeff == 0.0 || rows == 0 {
            0.0
        } else {
            let mut mean = vec![0.0f64; n];
            for row in vp.data().chunks(n) {
                for (m, &p) in mean.iter_mut().zip(row) {
                    *m += p.f64();
                }
            }
            let s: f64 = mean.iter().zip(frac).map(|(m, f)| f * m / rows as f64).sum();
            coeff * n as f64 * s
        };
        self.push(
            Tensor::scalar(T::of(value)),
            Op::BalanceLoss {
                probs,
                frac: frac.to_vec(),
                coeff,
            },
            &[probs],
        )
    }

    /// Back-propagates from a scalar `loss`, leaving gradients on the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::DoubleBackward);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.value(loss).shape().to_vec(),
                rhs: vec![],
            });
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(&self.nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// [`Graph::backward`], then adds every parameter gradient into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?;
        for (&id, &var) in &self.params {
            if let Some(g) = self.grads[var.0].as_ref() {
                let dst = store.get_mut(id).value.grad_mut();
                for (d, &s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Ok(())
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).fold(T::zero(), |acc, v| acc + v).f64()
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
    max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln()
}

fn grad_buf<'a, T: Scalar>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backward_node<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.rows(), va.cols(), vb.cols());
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                let bt = transpose(vb.data(), k, n);
                matmul_into(g, &bt, ga, m, n, k);
            }
            if let Some(gb) = grad_buf(grads, nodes, *b) {
                let at = transpose(va.data(), m, k);
                matmul_into(&at, g, gb, k, m, n);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = grad_buf(grads, nodes, *v) {
                    gv.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                for ((d, &s), &o) in ga.iter_mut().zip(g).zip(vb) {
                    *d += s * o;
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, *b) {
                for ((d, &s), &o) in gb.iter_mut().zip(g).zip(va) {
                    *d += s * o;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c);
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = axis_strides(node.value.shape(), *axis);
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for o in 0..outer {
                    for s in 0..inner {
                        let base = o * len * inner + s;
                        let dotp: f64 = (0..len)
                            .map(|j| (g[base + j * inner] * y[base + j * inner]).f64())
                            .sum();
                        let dotp = T::of(dotp);
                        for j in 0..len {
                            let idx = base + j * inner;
                            gx[idx] += y[idx] * (g[idx] - dotp);
                        }
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for ((d, &s), &yv) in gx.iter_mut().zip(g).zip(y) {
                    *d += s * yv * (T::one() - yv);
                }
            }
        }
        Op::Gelu(x) => {
            let xs = val(*x).data();
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for ((d, &s), &xv) in gx.iter_mut().zip(g).zip(xs) {
                    let v = xv.f64();
                    let u = GELU_C * (v + 0.044715 * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    let deriv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                    *d += s * T::of(deriv);
                }
            }
        }
        Op::Silu(x) => {
            let xs = val(*x).data();
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for ((d, &s), &xv) in gx.iter_mut().zip(g).zip(xs) {
                    let v = xv.f64();
                    let sg = sigmoid(v);
                    *d += s * T::of(sg * (1.0 + v * (1.0 - sg)));
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (vx, vg) = (val(*x), val(*gain));
            let cols = vx.cols();
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = vx.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let s: f64 = (0..cols).map(|j| (gr[j] * vg.data()[j] * xr[j]).f64()).sum();
                    let c = s * inv * inv * inv / cols as f64;
                    for j in 0..cols {
                        let v = (gr[j] * vg.data()[j]).f64() * inv - xr[j].f64() * c;
                        gx[r * cols + j] += T::of(v);
                    }
                }
            }
            if let Some(gg) = grad_buf(grads, nodes, *gain) {
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = vx.row(r);
                    let inv = T::of(inv);
                    for j in 0..cols {
                        gg[j] += g[r * cols + j] * xr[j] * inv;
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            seq_len,
            probs,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), *heads, *seq_len, probs),
        Op::GatherRows { src, rows } => {
            let cols = node.value.cols();
            if let Some(gs) = grad_buf(grads, nodes, *src) {
                for (r, &t) in rows.iter().enumerate() {
                    for (d, &s) in gs[t * cols..(t + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *d += s;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let vocab = val(*logits).cols();
            let scale = g[0] / T::of(targets.len() as f64);
            if let Some(gl) = grad_buf(grads, nodes, *logits) {
                for (t, &target) in targets.iter().enumerate() {
                    let row = &mut gl[t * vocab..(t + 1) * vocab];
                    for (d, &p) in row.iter_mut().zip(&probs[t * vocab..(t + 1) * vocab]) {
                        *d += p * scale;
                    }
                    row[target] -= scale;
                }
            }
        }
        Op::RoutingWeights { scores, selected } => {
            let vs = val(*scores);
            let n = vs.cols();
            let w = node.value.data();
            if let Some(gs) = grad_buf(grads, nodes, *scores) {
                for (t, sel) in selected.iter().enumerate() {
                    let row = vs.row(t);
                    let denom: f64 = sel.iter().map(|&i| row[i].f64()).sum();
                    let gw: f64 = sel.iter().map(|&i| (g[t * n + i] * w[t * n + i]).f64()).sum();
                    for &j in sel {
                        gs[t * n + j] += T::of((g[t * n + j].f64() - gw) / denom);
                    }
                }
            }
        }
        Op::Combine { weights, parts } => {
            let vw = val(*weights);
            let n = vw.cols();
            let dim = node.value.cols();
            for part in parts {
                let vo = val(part.output);
                if let Some(go) = grad_buf(grads, nodes, part.output) {
                    for (r, &t) in part.rows.iter().enumerate() {
                        let w = vw.data()[t * n + part.expert];
                        for (d, &s) in go[r * dim..(r + 1) * dim].iter_mut().zip(&g[t * dim..(t + 1) * dim]) {
                            *d += w * s;
                        }
                    }
                }
                if let Some(gw) = grad_buf(grads, nodes, *weights) {
                    for (r, &t) in part.rows.iter().enumerate() {
                        gw[t * n + part.expert] += T::of(dot(vo.row(r), &g[t * dim..(t + 1) * dim]));
                    }
                }
            }
        }
        Op::BalanceLoss { probs, frac, coeff } => {
            let vp = val(*probs);
            let (rows, n) = (vp.rows(), vp.cols());
            if *coeff == 0.0 || rows == 0 {
                return;
            }
            if let Some(gp) = grad_buf(grads, nodes, *probs) {
                let base = g[0].f64() * coeff * n as f64 / rows as f64;
                let per: Vec<T> = frac.iter().map(|f| T::of(base * f)).collect();
                for row in gp.chunks_mut(n) {
                    for (d, &p) in row.iter_mut().zip(&per) {
                        *d += p;
                    }
                }
            }
        }
    }
}

fn attention_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    (q, k, v): (Var, Var, Var),
    heads: usize,
    seq_len: usize,
    probs: &[T],
) {
    let vq = nodes[q.0].value.data();
    let vk = nodes[k.0].value.data();
    let vv = nodes[v.0].value.data();
    let (rows, d) = (nodes[q.0].value.rows(), nodes[q.0].value.cols());
    let batch = rows / seq_len;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); rows * d];
    let mut dk = vec![T::zero(); rows * d];
    let mut dv = vec![T::zero(); rows * d];
    let mut dp = vec![T::zero(); seq_len];
    for b in 0..batch {
        for h in 0..heads {
            let pbase = (b * heads + h) * seq_len * seq_len;
            for i in 0..seq_len {
                let p = &probs[pbase + i * seq_len..][..=i];
                let off_i = (b * seq_len + i) * d + h * dh;
                let go = &g[off_i..off_i + dh];
                let mut weighted = 0.0f64;
                for j in 0..=i {
                    let off_j = (b * seq_len + j) * d + h * dh;
                    dp[j] = T::of(dot(go, &vv[off_j..off_j + dh]));
                    weighted += (p[j] * dp[j]).f64();
                    for (dvx, &gx) in dv[off_j..off_j + dh].iter_mut().zip(go) {
                        *dvx += p[j] * gx;
                    }
                }
                let weighted = T::of(weighted);
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let off_j = (b * seq_len + j) * d + h * dh;
                    for c in 0..dh {
                        dq[off_i + c] += ds * vk[off_j + c];
                        dk[off_j + c] += ds * vq[off_i + c];
                    }
                }
            }
        }
    }
    for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(gx) = grad_buf(grads, nodes, var) {
            gx.iter_mut().zip(buf).for_each(|(d, s)| *d += s);
        }
    }
}
