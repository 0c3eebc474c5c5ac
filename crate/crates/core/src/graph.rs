//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node; node indices are a topological order, so
//! [`Graph::backward`] walks them from the loss down to index 0 and each node
//! is visited exactly once. Fan-out gradients are summed in that fixed order,
//! which keeps repeated runs bit-identical.

use crate::error::{Error, Result};
use crate::tensor::{gemm_into, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a parameter in its owning registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// A contiguous run of rows forming one sequence in a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        plan: AttentionPlan,
        probs: Vec<T>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Transpose(Var),
    Sum(Var),
    DiagCrossEntropy {
        logits: Var,
        probs: Vec<T>,
    },
}

#[derive(Clone, Debug)]
struct AttentionPlan {
    segments: Vec<Segment>,
    heads: usize,
    causal: bool,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Values are immutable once produced.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a node; `None` if it does not depend on any trainable leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of trainable parameter leaves, in recording order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(p, i)| self.by_node[i].as_ref().map(|g| (p, g)))
    }
}

fn check_same(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn matrix_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        _ => Err(Error::Shape(format!("expected a matrix, got {shape:?}"))),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Numerically stable softmax of `row[..limit]`; entries from `limit` on are
/// zeroed.
fn softmax_prefix<T: Real>(row: &mut [T], limit: usize) {
    let max = row[..limit]
        .iter()
        .fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in &mut row[..limit] {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in &mut row[..limit] {
        *v = *v / total;
    }
    for v in &mut row[limit..] {
        *v = T::zero();
    }
}

/// Row-wise softmax with an optional keep-mask. Masked entries act as `-inf`
/// logits and come out exactly zero.
pub fn softmax_rows<T: Real>(x: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let (r, c) = matrix_dims(x.shape())?;
    if let Some(m) = mask {
        if m.len() != r * c {
            return Err(Error::Shape(format!(
                "mask of {} entries for {:?}",
                m.len(),
                x.shape()
            )));
        }
    }
    let mut out = x.clone();
    for i in 0..r {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        match mask {
            None => softmax_prefix(row, c),
            Some(m) => {
                let keep = &m[i * c..(i + 1) * c];
                if !keep.iter().any(|&k| k) {
                    return Err(Error::InvalidMask { row: i });
                }
                let max = row
                    .iter()
                    .zip(keep)
                    .filter(|(_, &k)| k)
                    .fold(T::neg_infinity(), |acc, (&v, _)| acc.max(v));
                let mut total = T::zero();
                for (v, &k) in row.iter_mut().zip(keep) {
                    *v = if k { (*v - max).exp() } else { T::zero() };
                    total = total + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / total;
                }
            }
        }
    }
    Ok(out)
}

/// Layer normalisation over the last axis. Returns output, per-row means, and
/// per-row reciprocal standard deviations.
fn layer_norm_forward<T: Real>(
    x: &Tensor<T>,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = x.cols();
    let r = x.rows();
    let n = T::from_f64(c as f64);
    let mut out = x.clone();
    let mut means = Vec::with_capacity(r);
    let mut rstds = Vec::with_capacity(r);
    for i in 0..r {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / n;
        let rstd = T::one() / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * gain[j] + bias[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Free leaf; receives a gradient when `trainable`.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf { param: None }, trainable)
    }

    /// Leaf bound to a registry parameter.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf { param: Some(id) }, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(va.shape(), vb.shape(), what)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.len() != c {
            return Err(Error::Shape(format!(
                "bias {:?} for rows of {:?}",
                vb.shape(),
                vx.shape()
            )));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o = *o + b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let c = self.value(x).cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::Shape(format!(
                "layer_norm gain {:?} / bias {:?} for {:?}",
                self.value(gain).shape(),
                self.value(bias).shape(),
                self.value(x).shape()
            )));
        }
        let (out, mean, rstd) = layer_norm_forward(
            self.value(x),
            self.value(gain).data(),
            self.value(bias).data(),
            T::from_f64(eps),
        );
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = softmax_rows(self.value(x), mask)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Gathers rows of `x` (embedding lookup when `x` is a table).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Shape(format!(
                    "row {i} out of range for {:?}",
                    vx.shape()
                )));
            }
            data.extend_from_slice(vx.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::Shape(format!(
                    "concat of {c} columns with {:?}",
                    v.shape()
                )));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / c;
        let out = Tensor::new(vec![rows, c], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[rows × d]`; each segment attends only within
    /// itself, and with `causal` a position sees only itself and earlier ones.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        check_same(vq.shape(), vk.shape(), "attention q/k")?;
        check_same(vq.shape(), vv.shape(), "attention q/v")?;
        let (rows, d) = matrix_dims(vq.shape())?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "{d} columns not divisible into {heads} heads"
            )));
        }
        for s in segments {
            if s.len == 0 || s.start + s.len > rows {
                return Err(Error::Shape(format!("segment {s:?} outside {rows} rows")));
            }
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut out = Tensor::zeros(&[rows, d]);
        let total: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
        let mut probs = vec![T::zero(); total];
        let mut off = 0;
        for s in segments {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..s.len {
                    let qi = &qd[(s.start + i) * d..][cols.clone()];
                    let limit = if causal { i + 1 } else { s.len };
                    let p = &mut probs[off + i * s.len..off + (i + 1) * s.len];
                    for j in 0..limit {
                        let kj = &kd[(s.start + j) * d..][cols.clone()];
                        p[j] = qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
                    }
                    softmax_prefix(p, limit);
                    let o = &mut out.data_mut()[(s.start + i) * d..][cols.clone()];
                    for j in 0..limit {
                        let vj = &vd[(s.start + j) * d..][cols.clone()];
                        for (oc, &vc) in o.iter_mut().zip(vj) {
                            *oc = *oc + p[j] * vc;
                        }
                    }
                }
                off += s.len * s.len;
            }
        }
        let plan = AttentionPlan {
            segments: segments.to_vec(),
            heads,
            causal,
        };
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                plan,
                probs,
            },
            rg,
        ))
    }

    /// Scales each row to unit L2 norm; zero rows are rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(vx.rows());
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            if !(n > T::zero()) || !n.is_finite() {
                return Err(Error::DegenerateVector(format!("row {i} has norm {n:?}")));
            }
            for v in row.iter_mut() {
                *v = *v / n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Mean over rows of `-log softmax(row_i)[i]` for a square logit matrix:
    /// the cross-entropy where row `i`'s target is column `i`.
    pub fn diag_cross_entropy(&mut self, logits: Var) -> Result<Var> {
        let vl = self.value(logits);
        let (r, c) = matrix_dims(vl.shape())?;
        if r != c {
            return Err(Error::Shape(format!(
                "diagonal cross-entropy needs a square matrix, got {:?}",
                vl.shape()
            )));
        }
        let mut probs = vl.data().to_vec();
        let mut total = T::zero();
        for i in 0..r {
            let row = &vl.data()[i * c..(i + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            total = total + (lse - row[i]);
            softmax_prefix(&mut probs[i * c..(i + 1) * c], c);
        }
        let out = Tensor::scalar(total / T::from_f64(r as f64));
        let rg = self.rg(logits);
        Ok(self.push(out, Op::DiagCrossEntropy { logits, probs }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(p) } if n.requires_grad => Some((p, i)),
                _ => None,
            })
            .collect();
        // Drop interior gradients of non-leaf nodes that did not need them.
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut Tensor<T>)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let g = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(g);
    }

    fn add_into(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: &[T], sign: T) {
        self.accumulate(grads, v, |g| {
            for (a, &d) in g.data_mut().iter_mut().zip(delta) {
                *a = *a + sign * d;
            }
        });
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                self.accumulate(grads, *a, |ga| {
                    gemm_into(gd, false, vb.data(), true, ga.data_mut(), m, n, k, T::one())
                });
                self.accumulate(grads, *b, |gb| {
                    gemm_into(va.data(), true, gd, false, gb.data_mut(), k, m, n, T::one())
                });
            }
            Op::Add(a, b) => {
                self.add_into(grads, *a, gd, T::one());
                self.add_into(grads, *b, gd, T::one());
            }
            Op::Sub(a, b) => {
                self.add_into(grads, *a, gd, T::one());
                self.add_into(grads, *b, gd, -T::one());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga: Vec<T> = gd.iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
                let gb: Vec<T> = gd.iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
                self.add_into(grads, *a, &ga, T::one());
                self.add_into(grads, *b, &gb, T::one());
            }
            Op::AddRow(x, bias) => {
                self.add_into(grads, *x, gd, T::one());
                let c = g.cols();
                self.accumulate(grads, *bias, |gb| {
                    for row in gd.chunks(c) {
                        for (a, &d) in gb.data_mut().iter_mut().zip(row) {
                            *a = *a + d;
                        }
                    }
                });
            }
            Op::Scale(x, c) => self.add_into(grads, *x, gd, *c),
            Op::Relu(x) => {
                let vx = self.value(*x);
                let gx: Vec<T> = gd
                    .iter()
                    .zip(vx.data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.add_into(grads, *x, &gx, T::one());
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let gx: Vec<T> = gd
                    .iter()
                    .zip(vx.data())
                    .map(|(&g, &x)| g * gelu_grad(x))
                    .collect();
                self.add_into(grads, *x, &gx, T::one());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let vx = self.value(*x);
                let gain_v = self.value(*gain).data();
                let c = vx.cols();
                let n = T::from_f64(c as f64);
                let mut gx = vec![T::zero(); vx.len()];
                let mut ggain = vec![T::zero(); c];
                let mut gbias = vec![T::zero(); c];
                for i in 0..vx.rows() {
                    let xr = vx.row(i);
                    let gr = &gd[i * c..(i + 1) * c];
                    let xhat: Vec<T> = xr.iter().map(|&v| (v - mean[i]) * rstd[i]).collect();
                    let mut sum_gh = T::zero();
                    let mut sum_gh_xh = T::zero();
                    for j in 0..c {
                        let gh = gr[j] * gain_v[j];
                        sum_gh = sum_gh + gh;
                        sum_gh_xh = sum_gh_xh + gh * xhat[j];
                        ggain[j] = ggain[j] + gr[j] * xhat[j];
                        gbias[j] = gbias[j] + gr[j];
                    }
                    for j in 0..c {
                        let gh = gr[j] * gain_v[j];
                        gx[i * c + j] = rstd[i] * (gh - sum_gh / n - xhat[j] * sum_gh_xh / n);
                    }
                }
                self.add_into(grads, *x, &gx, T::one());
                self.add_into(grads, *gain, &ggain, T::one());
                self.add_into(grads, *bias, &gbias, T::one());
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut gx = vec![T::zero(); y.len()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &g)| a + p * g);
                    for j in 0..c {
                        gx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add_into(grads, *x, &gx, T::one());
            }
            Op::SelectRows { x, idx } => {
                let c = g.cols();
                self.accumulate(grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = gx.row_mut(i);
                        for (a, &d) in dst.iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                            *a = *a + d;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.add_into(grads, p, &gd[off..off + len], T::one());
                    off += len;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                plan,
                probs,
            } => {
                let (gq, gk, gv) = self.attention_backward(*q, *k, *v, plan, probs, gd);
                self.add_into(grads, *q, &gq, T::one());
                self.add_into(grads, *k, &gk, T::one());
                self.add_into(grads, *v, &gv, T::one());
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                let mut gx = vec![T::zero(); y.len()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &g)| a + p * g);
                    for j in 0..c {
                        gx[i * c + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                self.add_into(grads, *x, &gx, T::one());
            }
            Op::Transpose(x) => {
                let gt = g.transpose();
                self.add_into(grads, *x, gt.data(), T::one());
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.accumulate(grads, *x, |gx| {
                    for a in gx.data_mut() {
                        *a = *a + s;
                    }
                });
            }
            Op::DiagCrossEntropy { logits, probs } => {
                let c = self.value(*logits).cols();
                let scale = gd[0] / T::from_f64(c as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for i in 0..c {
                    gl[i * c + i] = gl[i * c + i] - scale;
                }
                self.add_into(grads, *logits, &gl, T::one());
            }
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        plan: &AttentionPlan,
        probs: &[T],
        gd: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let d = self.value(q).cols();
        let dh = d / plan.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        let mut gv = vec![T::zero(); vd.len()];
        let mut off = 0;
        let mut dp = Vec::new();
        for s in &plan.segments {
            for h in 0..plan.heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..s.len {
                    let limit = if plan.causal { i + 1 } else { s.len };
                    let p = &probs[off + i * s.len..off + i * s.len + limit];
                    let gi = &gd[(s.start + i) * d..][cols.clone()];
                    dp.clear();
                    for j in 0..limit {
                        let vj = &vd[(s.start + j) * d..][cols.clone()];
                        dp.push(gi.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y));
                        let gvj = &mut gv[(s.start + j) * d..][cols.clone()];
                        for (a, &g) in gvj.iter_mut().zip(gi) {
                            *a = *a + p[j] * g;
                        }
                    }
                    let dot = p.iter().zip(&dp).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    let qi = &qd[(s.start + i) * d..][cols.clone()];
                    for j in 0..limit {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let kj = &kd[(s.start + j) * d..][cols.clone()];
                        let gqi = &mut gq[(s.start + i) * d..][cols.clone()];
                        for (a, &x) in gqi.iter_mut().zip(kj) {
                            *a = *a + ds * x;
                        }
                        let gkj = &mut gk[(s.start + j) * d..][cols.clone()];
                        for (a, &x) in gkj.iter_mut().zip(qi) {
                            *a = *a + ds * x;
                        }
                    }
                }
                off += s.len * s.len;
            }
        }
        (gq, gk, gv)
    }
}
