//! Wengert tape over dense tensors.
//!
//! Ops are recorded in execution order, so every node's inputs precede it.
//! [`Tape::backward`] walks the record in reverse and accumulates adjoints.
//! All kernels are generic over [`Scalar`]; see the `scalar` module for how
//! that yields Hessian-vector products.

use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layer norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

// tanh-approximation GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Clone, Debug)]
pub(crate) struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub prefix: usize,
    /// Valid (unpadded) length of each sequence.
    pub lengths: Vec<usize>,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, prefix: Option<(Var, Var)>, shape: AttentionShape },
    MeanPool { x: Var, batch: usize, seq: usize, lengths: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Sum { x: Var },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Attention { .. } => "attention",
            Op::MeanPool { .. } => "mean_pool",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
        }
    }

    fn backward_name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf (backward)",
            Op::MatMul { .. } => "matmul (backward)",
            Op::AddBias { .. } => "add_bias (backward)",
            Op::Add { .. } => "add (backward)",
            Op::Mul { .. } => "mul (backward)",
            Op::Scale { .. } => "scale (backward)",
            Op::Relu { .. } => "relu (backward)",
            Op::Gelu { .. } => "gelu (backward)",
            Op::LayerNorm { .. } => "layer_norm (backward)",
            Op::Embedding { .. } => "embedding (backward)",
            Op::Attention { .. } => "attention (backward)",
            Op::MeanPool { .. } => "mean_pool (backward)",
            Op::CrossEntropy { .. } => "cross_entropy (backward)",
            Op::Sum { .. } => "sum (backward)",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Gelu { x }
            | Op::MeanPool { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Attention { q, k, v, prefix, .. } => {
                let mut ins = vec![*q, *k, *v];
                if let Some((pk, pv)) = prefix {
                    ins.push(*pk);
                    ins.push(*pv);
                }
                ins
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<S> {
    op: Op,
    value: Tensor<S>,
    /// Intermediates kept for the reverse sweep (softmax probabilities,
    /// normalized activations, ...).
    saved: Vec<Vec<S>>,
    requires_grad: bool,
}

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    var: Var,
    requires_grad: bool,
}

/// Gradients keyed by parameter name.
pub type GradMap<S = f64> = BTreeMap<String, Tensor<S>>;

pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    params: Vec<ParamEntry>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Result<Var> {
        self.push_leaf(t, false)
    }

    /// Named parameter leaf.
    pub fn param(&mut self, name: &str, t: Tensor<S>, requires_grad: bool) -> Result<Var> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        let var = self.push_leaf(t, requires_grad)?;
        self.params.push(ParamEntry { name: name.to_string(), var, requires_grad });
        Ok(var)
    }

    fn push_leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> Result<Var> {
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { op: Op::Leaf, value: t, saved: Vec::new(), requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let (value, saved) = compute(&op, |v| &self.nodes[v.0].value)?;
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value, saved, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul { a, b })
    }

    /// `x[m×n] + bias[n]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.record(Op::AddBias { x, bias })
    }

    /// `x·W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Relu { x })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Gelu { x })
    }

    /// Row-wise layer norm over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.record(Op::LayerNorm { x, gamma, beta })
    }

    pub fn embedding(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.record(Op::Embedding { table, ids })
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// `seq` rows each. `q`, `k`, `v` are `[batch·seq, d]`. Optional prefix
    /// keys/values (`[p, d]`) are shared by every sequence and always
    /// visible; keys at positions `>= lengths[b]` are masked.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        batch: usize,
        seq: usize,
        heads: usize,
        lengths: Vec<usize>,
    ) -> Result<Var> {
        let p = match prefix {
            Some((pk, _)) => self.value(pk).rows(),
            None => 0,
        };
        let shape = AttentionShape { batch, seq, heads, prefix: p, lengths };
        self.record(Op::Attention { q, k, v, prefix, shape })
    }

    /// Mean over the first `lengths[b]` rows of each length-`seq` block.
    pub fn mean_pool(&mut self, x: Var, batch: usize, seq: usize, lengths: Vec<usize>) -> Result<Var> {
        self.record(Op::MeanPool { x, batch, seq, lengths })
    }

    /// Mean softmax cross-entropy of `logits[b×c]` against class targets,
    /// computed through a log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.record(Op::CrossEntropy { logits, targets })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum { x })
    }

    /// Recompute every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor<S>>> {
        let mut values: Vec<Tensor<S>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => compute(op, |v| &values[v.0])?.0,
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar `loss`. Returns a gradient for every
    /// parameter registered with `requires_grad`; parameters the loss does
    /// not reach get an explicit zero tensor.
    pub fn backward(&self, loss: Var) -> Result<GradMap<S>> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        if !self.params.iter().any(|p| p.requires_grad) {
            return Err(Error::Contract("no parameter requires a gradient".into()));
        }

        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite { op: node.op.backward_name() });
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut out = GradMap::new();
        for p in self.params.iter().filter(|p| p.requires_grad) {
            let shape = self.nodes[p.var.0].value.shape().to_vec();
            let data = match grads.get_mut(p.var.0).and_then(Option::take) {
                Some(g) => g,
                None => vec![S::zero(); shape.iter().product()],
            };
            if !data.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite { op: "parameter gradient" });
            }
            out.insert(p.name.clone(), Tensor::new(shape, data)?);
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    S::gemm_acc(m, n, k, g, false, val(*b).data(), true, ga);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    S::gemm_acc(k, m, n, val(*a).data(), true, g, false, gb);
                }
            }
            Op::AddBias { x, bias } => {
                let n = val(*bias).len();
                if wants(*x) {
                    accumulate(slot(grads, *x, g.len()), g);
                }
                if wants(*bias) {
                    let gb = slot(grads, *bias, n);
                    for row in g.chunks_exact(n) {
                        accumulate(gb, row);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        accumulate(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Mul { a, b } => {
                // Evaluate both products before touching either slot so
                // `mul(x, x)` accumulates 2·x·g.
                let da: Option<Vec<S>> = wants(*a)
                    .then(|| g.iter().zip(val(*b).data()).map(|(&gi, &bi)| gi * bi).collect());
                let db: Option<Vec<S>> = wants(*b)
                    .then(|| g.iter().zip(val(*a).data()).map(|(&gi, &ai)| gi * ai).collect());
                if let Some(da) = da {
                    accumulate(slot(grads, *a, g.len()), &da);
                }
                if let Some(db) = db {
                    accumulate(slot(grads, *b, g.len()), &db);
                }
            }
            Op::Scale { x, c } => {
                if wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += gi.scale(*c);
                    }
                }
            }
            Op::Relu { x } => {
                if wants(*x) {
                    let xs = val(*x).data();
                    let gx = slot(grads, *x, g.len());
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xs) {
                        if xi.value() > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if wants(*x) {
                    let xs = val(*x).data();
                    let gx = slot(grads, *x, g.len());
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xs) {
                        *o += gi * gelu_grad(xi);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let n = val(*gamma).len();
                let xhat = &node.saved[0];
                let rstd = &node.saved[1];
                let gam = val(*gamma).data();
                if wants(*gamma) {
                    let gg = slot(grads, *gamma, n);
                    for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = slot(grads, *beta, n);
                    for grow in g.chunks_exact(n) {
                        accumulate(gb, grow);
                    }
                }
                if wants(*x) {
                    let inv_n = 1.0 / n as f64;
                    let gx = slot(grads, *x, g.len());
                    for (r, ((grow, hrow), xrow)) in g
                        .chunks_exact(n)
                        .zip(xhat.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                        .enumerate()
                    {
                        let mut mean_d = S::zero();
                        let mut mean_dh = S::zero();
                        for j in 0..n {
                            let d = grow[j] * gam[j];
                            mean_d += d;
                            mean_dh += d * hrow[j];
                        }
                        let mean_d = mean_d.scale(inv_n);
                        let mean_dh = mean_dh.scale(inv_n);
                        for j in 0..n {
                            let d = grow[j] * gam[j];
                            xrow[j] += rstd[r] * (d - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let d = val(*table).cols();
                    let gt = slot(grads, *table, val(*table).len());
                    for (row, &id) in g.chunks_exact(d).zip(ids) {
                        accumulate(&mut gt[id * d..(id + 1) * d], row);
                    }
                }
            }
            Op::Attention { q, k, v, prefix, shape } => {
                attention_backward(self, node, *q, *k, *v, *prefix, shape, g, grads);
            }
            Op::MeanPool { x, batch: _, seq, lengths } => {
                if wants(*x) {
                    let d = val(*x).cols();
                    let gx = slot(grads, *x, val(*x).len());
                    for (b, &len) in lengths.iter().enumerate() {
                        let inv = 1.0 / len as f64;
                        let grow = &g[b * d..(b + 1) * d];
                        for t in 0..len {
                            let r = b * seq + t;
                            for (o, &gi) in gx[r * d..(r + 1) * d].iter_mut().zip(grow) {
                                *o += gi.scale(inv);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if wants(*logits) {
                    let c = val(*logits).cols();
                    let probs = &node.saved[0];
                    let scale = g[0].scale(1.0 / targets.len() as f64);
                    let gl = slot(grads, *logits, probs.len());
                    for (b, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let mut d = probs[b * c + j];
                            if j == t {
                                d -= S::one();
                            }
                            gl[b * c + j] += scale * d;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    let gx = slot(grads, *x, val(*x).len());
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn accumulate<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn gelu<S: Scalar>(x: S) -> S {
    let u = (x + x * x * x.scale(GELU_CUBIC)).scale(GELU_SQRT_2_OVER_PI);
    x.scale(0.5) * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let u = (x + x * x * x.scale(GELU_CUBIC)).scale(GELU_SQRT_2_OVER_PI);
    let t = u.tanh();
    let du = (S::one() + x * x.scale(3.0 * GELU_CUBIC)).scale(GELU_SQRT_2_OVER_PI);
    (S::one() + t).scale(0.5) + x.scale(0.5) * (S::one() - t * t) * du
}

/// Forward kernel for one op. Returns the output and any saved
/// intermediates.
fn compute<'a, S: Scalar>(
    op: &Op,
    val: impl Fn(Var) -> &'a Tensor<S>,
) -> Result<(Tensor<S>, Vec<Vec<S>>)> {
    let none = Vec::new();
    let out = match op {
        Op::Leaf => return Err(Error::Contract("leaf nodes are not computed".into())),
        Op::MatMul { a, b } => {
            let (ta, tb) = (val(*a), val(*b));
            if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
                return Err(Error::shape("matmul", ta.shape(), tb.shape()));
            }
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            let mut c = vec![S::zero(); m * n];
            S::gemm_acc(m, k, n, ta.data(), false, tb.data(), false, &mut c);
            (Tensor::new(vec![m, n], c)?, none)
        }
        Op::AddBias { x, bias } => {
            let (tx, tb) = (val(*x), val(*bias));
            let n = tb.len();
            if tx.cols() != n {
                return Err(Error::shape("add_bias", &[tx.rows(), n], tx.shape()));
            }
            let mut data = tx.data().to_vec();
            for row in data.chunks_exact_mut(n) {
                accumulate(row, tb.data());
            }
            (Tensor::new(tx.shape().to_vec(), data)?, none)
        }
        Op::Add { a, b } | Op::Mul { a, b } => {
            let (ta, tb) = (val(*a), val(*b));
            if ta.shape() != tb.shape() {
                return Err(Error::shape(op.name(), ta.shape(), tb.shape()));
            }
            let is_add = matches!(op, Op::Add { .. });
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| if is_add { x + y } else { x * y })
                .collect();
            (Tensor::new(ta.shape().to_vec(), data)?, none)
        }
        Op::Scale { x, c } => {
            let tx = val(*x);
            (Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| v.scale(*c)).collect())?, none)
        }
        Op::Relu { x } => {
            let tx = val(*x);
            let data = tx
                .data()
                .iter()
                .map(|&v| if v.value() > 0.0 { v } else { S::zero() })
                .collect();
            (Tensor::new(tx.shape().to_vec(), data)?, none)
        }
        Op::Gelu { x } => {
            let tx = val(*x);
            (Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| gelu(v)).collect())?, none)
        }
        Op::LayerNorm { x, gamma, beta } => {
            let (tx, tg, tb) = (val(*x), val(*gamma), val(*beta));
            let n = tg.len();
            if tx.cols() != n || tb.len() != n {
                return Err(Error::shape("layer_norm", &[tx.rows(), n], tx.shape()));
            }
            let inv_n = 1.0 / n as f64;
            let mut out = Vec::with_capacity(tx.len());
            let mut xhat = Vec::with_capacity(tx.len());
            let mut rstd = Vec::with_capacity(tx.rows());
            for row in tx.data().chunks_exact(n) {
                let mut mean = S::zero();
                for &v in row {
                    mean += v;
                }
                let mean = mean.scale(inv_n);
                let mut var = S::zero();
                for &v in row {
                    let c = v - mean;
                    var += c * c;
                }
                let r = S::one() / (var.scale(inv_n) + S::from_f64(LAYER_NORM_EPS)).sqrt();
                rstd.push(r);
                for j in 0..n {
                    let h = (row[j] - mean) * r;
                    xhat.push(h);
                    out.push(h * tg.data()[j] + tb.data()[j]);
                }
            }
            (Tensor::new(tx.shape().to_vec(), out)?, vec![xhat, rstd])
        }
        Op::Embedding { table, ids } => {
            let tt = val(*table);
            let (vocab, d) = (tt.rows(), tt.cols());
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::OutOfVocab { token: id, vocab_size: vocab });
                }
                out.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
            }
            (Tensor::new(vec![ids.len(), d], out)?, none)
        }
        Op::Attention { q, k, v, prefix, shape } => {
            let pre = prefix.map(|(pk, pv)| (val(pk), val(pv)));
            let (out, probs) = attention_forward(val(*q), val(*k), val(*v), pre, shape)?;
            (out, vec![probs])
        }
        Op::MeanPool { x, batch, seq, lengths } => {
            let tx = val(*x);
            let d = tx.cols();
            if tx.rows() != batch * seq || lengths.len() != *batch {
                return Err(Error::shape("mean_pool", &[batch * seq, d], tx.shape()));
            }
            let mut out = vec![S::zero(); batch * d];
            for (b, &len) in lengths.iter().enumerate() {
                if len == 0 || len > *seq {
                    return Err(Error::Contract(format!("mean_pool: invalid length {len}")));
                }
                let orow = &mut out[b * d..(b + 1) * d];
                for t in 0..len {
                    let r = b * seq + t;
                    accumulate(orow, &tx.data()[r * d..(r + 1) * d]);
                }
                let inv = 1.0 / len as f64;
                for o in orow.iter_mut() {
                    *o = o.scale(inv);
                }
            }
            (Tensor::new(vec![*batch, d], out)?, none)
        }
        Op::CrossEntropy { logits, targets } => {
            let tl = val(*logits);
            let c = tl.cols();
            if tl.rows() != targets.len() {
                return Err(Error::shape("cross_entropy", &[targets.len(), c], tl.shape()));
            }
            let mut probs = Vec::with_capacity(tl.len());
            let mut total = S::zero();
            for (row, &t) in tl.data().chunks_exact(c).zip(targets) {
                if t >= c {
                    return Err(Error::Contract(format!("target class {t} >= {c}")));
                }
                let (lse, p) = log_softmax_parts(row);
                total += lse - row[t];
                probs.extend(p);
            }
            let loss = total.scale(1.0 / targets.len() as f64);
            (Tensor::scalar(loss), vec![probs])
        }
        Op::Sum { x } => {
            let mut s = S::zero();
            for &v in val(*x).data() {
                s += v;
            }
            (Tensor::scalar(s), none)
        }
    };
    Ok(out)
}

/// Log-sum-exp of a row and its softmax, shifted by the row max.
fn log_softmax_parts<S: Scalar>(row: &[S]) -> (S, Vec<S>) {
    let max = row
        .iter()
        .map(|v| v.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let shift = S::from_f64(max);
    let exps: Vec<S> = row.iter().map(|&v| (v - shift).exp()).collect();
    let mut z = S::zero();
    for &e in &exps {
        z += e;
    }
    let lse = z.ln() + shift;
    let inv = S::one() / z;
    (lse, exps.into_iter().map(|e| e * inv).collect())
}

fn attention_dims(q: &[usize], shape: &AttentionShape) -> Result<(usize, usize)> {
    let d = q.get(1).copied().unwrap_or(0);
    if q.len() != 2 || q[0] != shape.batch * shape.seq {
        return Err(Error::shape("attention", &[shape.batch * shape.seq, d], q));
    }
    if shape.heads == 0 || d % shape.heads != 0 {
        return Err(Error::Contract(format!(
            "attention: d={d} not divisible by heads={}",
            shape.heads
        )));
    }
    if shape.lengths.len() != shape.batch
        || shape.lengths.iter().any(|&l| l == 0 || l > shape.seq)
    {
        return Err(Error::Contract("attention: invalid sequence lengths".into()));
    }
    Ok((d, d / shape.heads))
}

type PrefixRef<'a, S> = Option<(&'a Tensor<S>, &'a Tensor<S>)>;

fn attention_forward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    prefix: PrefixRef<'_, S>,
    shape: &AttentionShape,
) -> Result<(Tensor<S>, Vec<S>)> {
    let (d, dh) = attention_dims(q.shape(), shape)?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape("attention k/v", q.shape(), k.shape()));
    }
    if let Some((pk, pv)) = prefix {
        if pk.shape() != [shape.prefix, d] || pv.shape() != [shape.prefix, d] {
            return Err(Error::shape("attention prefix", &[shape.prefix, d], pk.shape()));
        }
    }
    let (t_len, p_len) = (shape.seq, shape.prefix);
    let n_keys = p_len + t_len;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![S::zero(); q.len()];
    let mut probs = vec![S::zero(); shape.batch * shape.heads * t_len * n_keys];

    let key_row = |b: usize, j: usize| -> (&[S], &[S]) {
        if j < p_len {
            let (pk, pv) = prefix.expect("prefix rows imply prefix tensors");
            (&pk.data()[j * d..(j + 1) * d], &pv.data()[j * d..(j + 1) * d])
        } else {
            let r = b * t_len + (j - p_len);
            (&k.data()[r * d..(r + 1) * d], &v.data()[r * d..(r + 1) * d])
        }
    };

    let mut scores = vec![S::zero(); n_keys];
    for b in 0..shape.batch {
        let visible = p_len + shape.lengths[b];
        for h in 0..shape.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..t_len {
                let qr = b * t_len + i;
                let qrow = &q.data()[qr * d..(qr + 1) * d][cols.clone()];
                let mut max = f64::NEG_INFINITY;
                for (j, sc) in scores.iter_mut().enumerate().take(visible) {
                    let krow = &key_row(b, j).0[cols.clone()];
                    let mut acc = S::zero();
                    for (&a, &c) in qrow.iter().zip(krow) {
                        acc += a * c;
                    }
                    *sc = acc.scale(scale);
                    max = max.max(sc.value());
                }
                let shift = S::from_f64(max);
                let mut z = S::zero();
                for sc in scores.iter_mut().take(visible) {
                    *sc = (*sc - shift).exp();
                    z += *sc;
                }
                let inv = S::one() / z;
                let pbase = ((b * shape.heads + h) * t_len + i) * n_keys;
                let orow = &mut out[qr * d..(qr + 1) * d][cols.clone()];
                for (j, &sc) in scores.iter().enumerate().take(visible) {
                    let p = sc * inv;
                    probs[pbase + j] = p;
                    let vrow = &key_row(b, j).1[cols.clone()];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(q.shape().to_vec(), out)?, probs))
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<S: Scalar>(
    tape: &Tape<S>,
    node: &Node<S>,
    q: Var,
    k: Var,
    v: Var,
    prefix: Option<(Var, Var)>,
    shape: &AttentionShape,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let qt = tape.value(q);
    let d = qt.cols();
    let dh = d / shape.heads;
    let (t_len, p_len) = (shape.seq, shape.prefix);
    let n_keys = p_len + t_len;
    let scale = 1.0 / (dh as f64).sqrt();
    let probs = &node.saved[0];
    let pre = prefix.map(|(pk, pv)| (tape.value(pk), tape.value(pv)));

    let mut dq = vec![S::zero(); qt.len()];
    let mut dk = vec![S::zero(); qt.len()];
    let mut dv = vec![S::zero(); qt.len()];
    let mut dpk = vec![S::zero(); p_len * d];
    let mut dpv = vec![S::zero(); p_len * d];

    let mut dp = vec![S::zero(); n_keys];
    for b in 0..shape.batch {
        let visible = p_len + shape.lengths[b];
        for h in 0..shape.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..t_len {
                let qr = b * t_len + i;
                let pbase = ((b * shape.heads + h) * t_len + i) * n_keys;
                let grow = &g[qr * d..(qr + 1) * d][cols.clone()];
                // dP = dO·Vᵀ, dV += Pᵀ·dO
                let mut dot = S::zero();
                for j in 0..visible {
                    let p = probs[pbase + j];
                    let (vrow, dvrow): (&[S], &mut [S]) = if j < p_len {
                        let (_, pv) = pre.expect("prefix");
                        (&pv.data()[j * d..(j + 1) * d], &mut dpv[j * d..(j + 1) * d])
                    } else {
                        let r = b * t_len + (j - p_len);
                        (&tape.value(v).data()[r * d..(r + 1) * d], &mut dv[r * d..(r + 1) * d])
                    };
                    let mut acc = S::zero();
                    for ((&gg, &vv), dvv) in grow.iter().zip(&vrow[cols.clone()]).zip(&mut dvrow[cols.clone()]) {
                        acc += gg * vv;
                        *dvv += p * gg;
                    }
                    dp[j] = acc;
                    dot += acc * p;
                }
                // dS = P ⊙ (dP − Σ dP·P), then through the 1/√dh scaling.
                let qrow: Vec<S> = qt.data()[qr * d..(qr + 1) * d][cols.clone()].to_vec();
                for j in 0..visible {
                    let ds = (probs[pbase + j] * (dp[j] - dot)).scale(scale);
                    let (krow, dkrow): (&[S], &mut [S]) = if j < p_len {
                        let (pk, _) = pre.expect("prefix");
                        (&pk.data()[j * d..(j + 1) * d], &mut dpk[j * d..(j + 1) * d])
                    } else {
                        let r = b * t_len + (j - p_len);
                        (&tape.value(k).data()[r * d..(r + 1) * d], &mut dk[r * d..(r + 1) * d])
                    };
                    let dqrow = &mut dq[qr * d..(qr + 1) * d][cols.clone()];
                    for (((dqv, &kv), dkv), &qv) in dqrow
                        .iter_mut()
                        .zip(&krow[cols.clone()])
                        .zip(&mut dkrow[cols.clone()])
                        .zip(&qrow)
                    {
                        *dqv += ds * kv;
                        *dkv += ds * qv;
                    }
                }
            }
        }
    }

    let wants = |x: Var| tape.requires_grad(x);
    for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
        if wants(var) {
            accumulate(slot(grads, var, buf.len()), &buf);
        }
    }
    if let Some((pk, pv)) = prefix {
        for (var, buf) in [(pk, dpk), (pv, dpv)] {
            if wants(var) {
                accumulate(slot(grads, var, buf.len()), &buf);
            }
        }
    }
}
