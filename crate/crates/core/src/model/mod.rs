//! Miniature pre-layer-norm transformer encoder with named parameter groups.
//!
//! The encoder stands in for a pretrained backbone: it is randomly
//! initialized from a seed, then frozen while adapters and the
//! classification head train.

mod checkpoint;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry};

use crate::adapters::{self, AdapterSpec};
use crate::autodiff::{gradient, Bindings, GradMap, Objective, ParamSet, Scalar, Tape, Tensor, Var};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::pruning::PruneMask;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
}

impl Default for EncoderConfig {
    /// Desk-scale default.
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 1000,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            n_layers: 4,
            max_seq_len: 64,
            n_classes: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("max_seq_len", self.max_seq_len),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("encoder.{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "encoder.d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Which part of the network a group belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupRole {
    Backbone,
    Adapter,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    /// Only adapter weight matrices are prunable; implies `trainable`.
    pub prunable: bool,
    pub n_in: usize,
    pub n_out: usize,
    pub role: GroupRole,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: EncoderConfig,
    groups: Vec<ParamGroup>,
    index: HashMap<String, usize>,
    adapter: Option<AdapterSpec>,
    mask: Option<PruneMask>,
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is positive and finite");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

pub(crate) fn constant(shape: Vec<usize>, c: f64) -> Tensor {
    Tensor::from_fn(shape, |_| c)
}

/// Builds a randomly initialized encoder with a classification head.
///
/// Linear weights are drawn from N(0, 1/n_in), embeddings from N(0, 1), the
/// head from N(0, 0.02²); biases start at zero and layer-norm gains at one.
/// Every group starts trainable.
pub fn build_encoder(cfg: &EncoderConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, ff) = (cfg.d_model, cfg.d_ff);
    let mut model = Model {
        cfg: cfg.clone(),
        groups: Vec::new(),
        index: HashMap::new(),
        adapter: None,
        mask: None,
    };

    let backbone = |m: &mut Model, name: String, t: Tensor, n_in: usize, n_out: usize| {
        m.push_group(ParamGroup {
            name,
            tensor: t,
            trainable: true,
            prunable: false,
            n_in,
            n_out,
            role: GroupRole::Backbone,
        })
    };
    let linear = |m: &mut Model, rng: &mut ChaCha8Rng, prefix: &str, w: &str, b: &str, n_in: usize, n_out: usize| {
        let std = 1.0 / (n_in as f64).sqrt();
        backbone(m, format!("{prefix}.{w}"), gaussian(rng, vec![n_in, n_out], std), n_in, n_out)?;
        backbone(m, format!("{prefix}.{b}"), constant(vec![n_out], 0.0), 1, n_out)
    };
    let norm = |m: &mut Model, prefix: &str| {
        backbone(m, format!("{prefix}.g"), constant(vec![d], 1.0), 1, d)?;
        backbone(m, format!("{prefix}.b"), constant(vec![d], 0.0), 1, d)
    };

    backbone(&mut model, "embed.tok".into(), gaussian(&mut rng, vec![cfg.vocab_size, d], 1.0), cfg.vocab_size, d)?;
    backbone(&mut model, "embed.pos".into(), gaussian(&mut rng, vec![cfg.max_seq_len, d], 1.0), cfg.max_seq_len, d)?;
    for l in 0..cfg.n_layers {
        let attn = format!("layer{l}.attn");
        norm(&mut model, &format!("layer{l}.ln1"))?;
        for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
            linear(&mut model, &mut rng, &attn, w, b, d, d)?;
        }
        norm(&mut model, &format!("layer{l}.ln2"))?;
        let ffn = format!("layer{l}.ffn");
        linear(&mut model, &mut rng, &ffn, "w1", "b1", d, ff)?;
        linear(&mut model, &mut rng, &ffn, "w2", "b2", ff, d)?;
    }
    norm(&mut model, "final_ln")?;
    let n_classes = cfg.n_classes;
    model.push_group(ParamGroup {
        name: "head.w".into(),
        tensor: gaussian(&mut rng, vec![d, n_classes], 0.02),
        trainable: true,
        prunable: false,
        n_in: d,
        n_out: n_classes,
        role: GroupRole::Head,
    })?;
    model.push_group(ParamGroup {
        name: "head.b".into(),
        tensor: constant(vec![n_classes], 0.0),
        trainable: true,
        prunable: false,
        n_in: 1,
        n_out: n_classes,
        role: GroupRole::Head,
    })?;
    Ok(model)
}

/// Freezes every backbone group; adapters and the head stay trainable.
pub fn freeze_backbone(model: &mut Model) {
    for g in model.groups.iter_mut().filter(|g| g.role == GroupRole::Backbone) {
        g.trainable = false;
    }
}

impl Model {
    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.index.get(name).map(|&i| &self.groups[i])
    }

    pub(crate) fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup> {
        self.index.get(name).map(|&i| &mut self.groups[i])
    }

    pub fn adapter_spec(&self) -> Option<&AdapterSpec> {
        self.adapter.as_ref()
    }

    pub(crate) fn set_adapter_spec(&mut self, spec: AdapterSpec) {
        self.adapter = Some(spec);
    }

    pub fn mask(&self) -> Option<&PruneMask> {
        self.mask.as_ref()
    }

    pub(crate) fn set_mask(&mut self, mask: PruneMask) {
        self.mask = Some(mask);
    }

    pub(crate) fn push_group(&mut self, g: ParamGroup) -> Result<()> {
        if self.index.contains_key(&g.name) {
            return Err(Error::Contract(format!("duplicate parameter group `{}`", g.name)));
        }
        if g.prunable && !g.trainable {
            return Err(Error::Contract(format!("group `{}` is prunable but frozen", g.name)));
        }
        self.index.insert(g.name.clone(), self.groups.len());
        self.groups.push(g);
        Ok(())
    }

    pub fn prunable_groups(&self) -> impl Iterator<Item = &ParamGroup> {
        self.groups.iter().filter(|g| g.prunable)
    }

    pub fn trainable_groups(&self) -> impl Iterator<Item = &ParamGroup> {
        self.groups.iter().filter(|g| g.trainable)
    }

    /// Current parameters; trainable groups are differentiated.
    pub fn param_set(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for g in &self.groups {
            ps.insert(g.name.clone(), g.tensor.clone(), g.trainable);
        }
        ps
    }

    /// Little-endian bytes of every parameter, in group order.
    pub fn param_bytes<'a>(&'a self, filter: impl Fn(&ParamGroup) -> bool + 'a) -> Vec<u8> {
        self.groups
            .iter()
            .filter(|g| filter(g))
            .flat_map(|g| g.tensor.data().iter().flat_map(|x| x.to_le_bytes()))
            .collect()
    }

    fn check_tokens(&self, batch: &[Example]) -> Result<(usize, Vec<usize>)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut lengths = Vec::with_capacity(batch.len());
        for ex in batch {
            let len = ex.tokens.len();
            if len == 0 {
                return Err(Error::Contract("empty token sequence".into()));
            }
            if len > self.cfg.max_seq_len {
                return Err(Error::SequenceTooLong { len, max: self.cfg.max_seq_len });
            }
            if let Some(&tok) = ex.tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
                return Err(Error::OutOfVocab { token: tok, vocab_size: self.cfg.vocab_size });
            }
            lengths.push(len);
        }
        Ok((*lengths.iter().max().expect("non-empty"), lengths))
    }

    /// Records the forward pass on `tape` and returns the `[batch, n_classes]`
    /// logits. Sequences shorter than the longest in the batch are padded
    /// and masked out of attention and pooling.
    pub fn forward_on<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bindings, batch: &[Example]) -> Result<Var> {
        let (seq, lengths) = self.check_tokens(batch)?;
        let bsz = batch.len();
        let spec = self.adapter.as_ref();

        let ids: Vec<usize> = batch
            .iter()
            .flat_map(|ex| (0..seq).map(move |t| ex.tokens.get(t).copied().unwrap_or(0)))
            .collect();
        let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();
        let tok = tape.embedding(p.get("embed.tok")?, ids)?;
        let pos = tape.embedding(p.get("embed.pos")?, positions)?;
        let mut h = tape.add(tok, pos)?;

        for l in 0..self.cfg.n_layers {
            let attn = format!("layer{l}.attn");
            let a = tape.layer_norm(h, p.get(&format!("layer{l}.ln1.g"))?, p.get(&format!("layer{l}.ln1.b"))?)?;
            let proj = |tape: &mut Tape<S>, w: &str, b: &str| {
                tape.affine(a, p.get(&format!("{attn}.{w}"))?, p.get(&format!("{attn}.{b}"))?)
            };
            let mut q = proj(tape, "wq", "bq")?;
            let k = proj(tape, "wk", "bk")?;
            let mut v = proj(tape, "wv", "bv")?;
            let mut prefix = None;
            if let Some(spec) = spec {
                if spec.variant.has_lora() {
                    q = adapters::lora_on(tape, p, &format!("{attn}.q"), spec, a, q)?;
                    v = adapters::lora_on(tape, p, &format!("{attn}.v"), spec, a, v)?;
                }
                if spec.variant.has_prefix() {
                    prefix = Some((p.get(&format!("{attn}.prefix_k"))?, p.get(&format!("{attn}.prefix_v"))?));
                }
            }
            let ctx = tape.attention(q, k, v, prefix, bsz, seq, self.cfg.n_heads, lengths.clone())?;
            let mut o = tape.affine(ctx, p.get(&format!("{attn}.wo"))?, p.get(&format!("{attn}.bo"))?)?;
            if spec.is_some_and(|s| s.variant.adapts_attention_output()) {
                o = adapters::bottleneck_on(tape, p, &format!("{attn}.adapter"), o)?;
            }
            h = tape.add(h, o)?;

            let ffn = format!("layer{l}.ffn");
            let f_in = tape.layer_norm(h, p.get(&format!("layer{l}.ln2.g"))?, p.get(&format!("layer{l}.ln2.b"))?)?;
            let z = tape.affine(f_in, p.get(&format!("{ffn}.w1"))?, p.get(&format!("{ffn}.b1"))?)?;
            let z = tape.gelu(z)?;
            let mut f = tape.affine(z, p.get(&format!("{ffn}.w2"))?, p.get(&format!("{ffn}.b2"))?)?;
            if let Some(spec) = spec {
                if spec.variant.adapts_ffn_output() {
                    f = adapters::bottleneck_on(tape, p, &format!("{ffn}.adapter"), f)?;
                }
                if spec.variant.has_parallel_ffn() {
                    f = adapters::parallel_on(tape, p, &format!("{ffn}.adapter"), spec, f_in, f)?;
                }
            }
            h = tape.add(h, f)?;
        }

        let hn = tape.layer_norm(h, p.get("final_ln.g")?, p.get("final_ln.b")?)?;
        let pooled = tape.mean_pool(hn, bsz, seq, lengths)?;
        tape.affine(pooled, p.get("head.w")?, p.get("head.b")?)
    }

    /// Logits without recording gradients.
    pub fn logits(&self, batch: &[Example]) -> Result<Tensor> {
        let mut tape = Tape::<f64>::new();
        let bindings = self.bind_frozen(&mut tape)?;
        let out = self.forward_on(&mut tape, &bindings, batch)?;
        Ok(tape.value(out).clone())
    }

    fn bind_frozen(&self, tape: &mut Tape<f64>) -> Result<Bindings> {
        let mut ps = ParamSet::new();
        for g in &self.groups {
            ps.insert(g.name.clone(), g.tensor.clone(), false);
        }
        Bindings::from_params(tape, &ps)
    }

    /// Summed mean cross-entropy over `batches` and its gradient with
    /// respect to every trainable group.
    pub fn loss_and_grad(&self, batches: &[&[Example]]) -> Result<(f64, GradMap)> {
        gradient(&ClassificationLoss { model: self, batches }, &self.param_set())
    }
}

/// Sum over batches of the mean cross-entropy of the model's logits.
pub struct ClassificationLoss<'a> {
    pub model: &'a Model,
    pub batches: &'a [&'a [Example]],
}

impl Objective for ClassificationLoss<'_> {
    fn loss<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bindings) -> Result<Var> {
        let mut total: Option<Var> = None;
        for batch in self.batches {
            let logits = self.model.forward_on(tape, p, batch)?;
            let ce = tape.cross_entropy(logits, batch.iter().map(|e| e.label).collect())?;
            total = Some(match total {
                Some(t) => tape.add(t, ce)?,
                None => ce,
            });
        }
        total.ok_or(Error::EmptyDataset)
    }
}

/// Convenience wrapper: logits for `batch` as `(rows, n_classes)`.
pub fn forward(model: &Model, batch: &[Example]) -> Result<Tensor> {
    model.logits(batch)
}
