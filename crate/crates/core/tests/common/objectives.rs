//! Small random objectives exercising every tape primitive.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sparse_adapter::autodiff::{Bindings, Objective, ParamSet, Scalar, Tape, Tensor, Var};
use sparse_adapter::Result;

pub fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Uniform in [-1, 1] but at least `gap` away from zero (keeps finite
/// differences off the ReLU kink).
pub fn uniform_away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) { mag } else { -mag }
    })
}

fn lift<S: Scalar>(t: &Tensor) -> Tensor<S> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| S::from_f64(x)).collect()).unwrap()
}

/// `sum(out ⊙ r)` so every output element carries a distinct weight.
fn weighted_sum<S: Scalar>(tape: &mut Tape<S>, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(lift(r))?;
    let m = tape.mul(out, rv)?;
    tape.sum(m)
}

#[derive(Clone, Copy, Debug)]
pub enum PrimitiveOp {
    MatMul,
    AddBias,
    Add,
    Mul,
    MulSelf,
    Scale,
    Relu,
    Gelu,
    LayerNorm,
    Embedding,
    Attention,
    PrefixAttention,
    MeanPool,
    CrossEntropy,
    Sum,
}

pub const ALL_OPS: [PrimitiveOp; 15] = [
    PrimitiveOp::MatMul,
    PrimitiveOp::AddBias,
    PrimitiveOp::Add,
    PrimitiveOp::Mul,
    PrimitiveOp::MulSelf,
    PrimitiveOp::Scale,
    PrimitiveOp::Relu,
    PrimitiveOp::Gelu,
    PrimitiveOp::LayerNorm,
    PrimitiveOp::Embedding,
    PrimitiveOp::Attention,
    PrimitiveOp::PrefixAttention,
    PrimitiveOp::MeanPool,
    PrimitiveOp::CrossEntropy,
    PrimitiveOp::Sum,
];

pub struct OpCase {
    pub op: PrimitiveOp,
    pub params: ParamSet,
    weights: Tensor,
}

const BATCH: usize = 2;
const SEQ: usize = 3;
const D: usize = 4;
const LENGTHS: [usize; 2] = [3, 2];

impl OpCase {
    pub fn random(op: PrimitiveOp, rng: &mut ChaCha8Rng) -> OpCase {
        let mut p = ParamSet::new();
        let put = |p: &mut ParamSet, n: &str, t: Tensor| p.insert(n, t, true);
        let out_shape = match op {
            PrimitiveOp::MatMul => {
                put(&mut p, "a", uniform(rng, vec![3, 4]));
                put(&mut p, "b", uniform(rng, vec![4, 5]));
                vec![3, 5]
            }
            PrimitiveOp::AddBias => {
                put(&mut p, "a", uniform(rng, vec![3, 4]));
                put(&mut p, "b", uniform(rng, vec![4]));
                vec![3, 4]
            }
            PrimitiveOp::Add | PrimitiveOp::Mul => {
                put(&mut p, "a", uniform(rng, vec![3, 4]));
                put(&mut p, "b", uniform(rng, vec![3, 4]));
                vec![3, 4]
            }
            PrimitiveOp::MulSelf | PrimitiveOp::Scale | PrimitiveOp::Gelu => {
                put(&mut p, "a", uniform(rng, vec![3, 4]));
                vec![3, 4]
            }
            PrimitiveOp::Relu => {
                put(&mut p, "a", uniform_away_from_zero(rng, vec![3, 4], 1e-3));
                vec![3, 4]
            }
            PrimitiveOp::LayerNorm => {
                put(&mut p, "a", uniform(rng, vec![3, 5]));
                put(&mut p, "b", uniform(rng, vec![5]));
                put(&mut p, "c", uniform(rng, vec![5]));
                vec![3, 5]
            }
            PrimitiveOp::Embedding => {
                put(&mut p, "a", uniform(rng, vec![6, 3]));
                vec![5, 3]
            }
            PrimitiveOp::Attention | PrimitiveOp::PrefixAttention => {
                for n in ["q", "k", "v"] {
                    put(&mut p, n, uniform(rng, vec![BATCH * SEQ, D]));
                }
                if matches!(op, PrimitiveOp::PrefixAttention) {
                    put(&mut p, "pk", uniform(rng, vec![2, D]));
                    put(&mut p, "pv", uniform(rng, vec![2, D]));
                }
                vec![BATCH * SEQ, D]
            }
            PrimitiveOp::MeanPool => {
                put(&mut p, "a", uniform(rng, vec![BATCH * SEQ, D]));
                vec![BATCH, D]
            }
            PrimitiveOp::CrossEntropy => {
                put(&mut p, "a", uniform(rng, vec![3, 4]));
                vec![1]
            }
            PrimitiveOp::Sum => {
                put(&mut p, "a", uniform(rng, vec![3, 4]));
                vec![1]
            }
        };
        let weights = uniform(rng, out_shape);
        OpCase { op, params: p, weights }
    }
}

impl Objective for OpCase {
    fn loss<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bindings) -> Result<Var> {
        let out = match self.op {
            PrimitiveOp::MatMul => tape.matmul(p.get("a")?, p.get("b")?)?,
            PrimitiveOp::AddBias => tape.add_bias(p.get("a")?, p.get("b")?)?,
            PrimitiveOp::Add => tape.add(p.get("a")?, p.get("b")?)?,
            PrimitiveOp::Mul => tape.mul(p.get("a")?, p.get("b")?)?,
            PrimitiveOp::MulSelf => {
                let a = p.get("a")?;
                tape.mul(a, a)?
            }
            PrimitiveOp::Scale => tape.scale(p.get("a")?, -1.7)?,
            PrimitiveOp::Relu => tape.relu(p.get("a")?)?,
            PrimitiveOp::Gelu => tape.gelu(p.get("a")?)?,
            PrimitiveOp::LayerNorm => tape.layer_norm(p.get("a")?, p.get("b")?, p.get("c")?)?,
            PrimitiveOp::Embedding => tape.embedding(p.get("a")?, vec![0, 5, 2, 2, 3])?,
            PrimitiveOp::Attention | PrimitiveOp::PrefixAttention => {
                let prefix = match self.op {
                    PrimitiveOp::PrefixAttention => Some((p.get("pk")?, p.get("pv")?)),
                    _ => None,
                };
                tape.attention(
                    p.get("q")?,
                    p.get("k")?,
                    p.get("v")?,
                    prefix,
                    BATCH,
                    SEQ,
                    2,
                    LENGTHS.to_vec(),
                )?
            }
            PrimitiveOp::MeanPool => tape.mean_pool(p.get("a")?, BATCH, SEQ, LENGTHS.to_vec())?,
            PrimitiveOp::CrossEntropy => {
                let ce = tape.cross_entropy(p.get("a")?, vec![1, 0, 3])?;
                return tape.scale(ce, self.weights.data()[0]);
            }
            PrimitiveOp::Sum => {
                let a = p.get("a")?;
                let sq = tape.mul(a, a)?;
                let s = tape.sum(sq)?;
                return tape.scale(s, self.weights.data()[0]);
            }
        };
        weighted_sum(tape, out, &self.weights)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Activation {
    Relu,
    Gelu,
}

/// Two-layer perceptron `CE(act(LN?(x·W1 + b1))·W2 + b2)` on a fixed batch.
pub struct Mlp {
    pub params: ParamSet,
    x: Tensor,
    targets: Vec<usize>,
    act: Activation,
    layer_norm: bool,
}

impl Mlp {
    pub fn random(rng: &mut ChaCha8Rng, n_in: usize, hidden: usize, n_out: usize, act: Activation, layer_norm: bool) -> Mlp {
        let batch = 4;
        let mut params = ParamSet::new();
        params.insert("w1", uniform(rng, vec![n_in, hidden]), true);
        params.insert("b1", uniform(rng, vec![hidden]), true);
        params.insert("w2", uniform(rng, vec![hidden, n_out]), true);
        params.insert("b2", uniform(rng, vec![n_out]), true);
        if layer_norm {
            params.insert("ln.g", uniform(rng, vec![hidden]), true);
            params.insert("ln.b", uniform(rng, vec![hidden]), true);
        }
        let x = match act {
            Activation::Relu => uniform_away_from_zero(rng, vec![batch, n_in], 1e-3),
            Activation::Gelu => uniform(rng, vec![batch, n_in]),
        };
        let targets = (0..batch).map(|_| rng.random_range(0..n_out)).collect();
        Mlp { params, x, targets, act, layer_norm }
    }

    /// The ten-parameter network: 1 input, 2 hidden units, 2 outputs.
    pub fn ten_params(rng: &mut ChaCha8Rng) -> Mlp {
        Mlp::random(rng, 1, 2, 2, Activation::Gelu, false)
    }
}

impl Objective for Mlp {
    fn loss<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bindings) -> Result<Var> {
        let x = tape.constant(lift(&self.x))?;
        let mut h = tape.affine(x, p.get("w1")?, p.get("b1")?)?;
        if self.layer_norm {
            h = tape.layer_norm(h, p.get("ln.g")?, p.get("ln.b")?)?;
        }
        let a = match self.act {
            Activation::Relu => tape.relu(h)?,
            Activation::Gelu => tape.gelu(h)?,
        };
        let logits = tape.affine(a, p.get("w2")?, p.get("b2")?)?;
        tape.cross_entropy(logits, self.targets.clone())
    }
}
