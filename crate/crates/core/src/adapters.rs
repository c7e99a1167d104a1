//! Adapter variants, parameter accounting and the Large-Sparse scaling rule.
//!
//! Weight layout is `[n_in, n_out]` and activations are row vectors, so a
//! bottleneck computes `x + gelu(x·W_down + b_down)·W_up + b_up`.
//!
//! | variant    | sites per layer                                         |
//! |------------|---------------------------------------------------------|
//! | `houlsby`  | after the attention output projection and after the FFN |
//! | `pfeiffer` | after the FFN                                           |
//! | `lora`     | low-rank update on the query and value projections     |
//! | `mam`      | parallel bottleneck beside the FFN, prefix keys/values  |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, ParamSet, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{constant, gaussian, GroupRole, Model, ParamGroup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    Houlsby,
    Pfeiffer,
    Lora,
    Mam,
}

impl AdapterVariant {
    pub fn name(self) -> &'static str {
        match self {
            AdapterVariant::Houlsby => "houlsby",
            AdapterVariant::Pfeiffer => "pfeiffer",
            AdapterVariant::Lora => "lora",
            AdapterVariant::Mam => "mam",
        }
    }

    pub(crate) fn adapts_attention_output(self) -> bool {
        self == AdapterVariant::Houlsby
    }

    pub(crate) fn adapts_ffn_output(self) -> bool {
        matches!(self, AdapterVariant::Houlsby | AdapterVariant::Pfeiffer)
    }

    pub(crate) fn has_parallel_ffn(self) -> bool {
        self == AdapterVariant::Mam
    }

    pub(crate) fn has_lora(self) -> bool {
        self == AdapterVariant::Lora
    }

    pub(crate) fn has_prefix(self) -> bool {
        self == AdapterVariant::Mam
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterInit {
    /// Standard deviation for every adapter weight matrix (and prefix).
    pub gaussian_std: f64,
    /// Start LoRA's B matrix at zero (the usual LoRA init). Off by default:
    /// zero weights score zero under magnitude and SNIP.
    #[serde(default)]
    pub lora_zero_init: bool,
}

impl Default for AdapterInit {
    fn default() -> Self {
        AdapterInit { gaussian_std: 1e-2, lora_zero_init: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub variant: AdapterVariant,
    /// Bottleneck dimension.
    pub r: usize,
    /// LoRA / MAM scale numerator; the update is multiplied by `lora_alpha / r`.
    #[serde(default = "default_alpha")]
    pub lora_alpha: f64,
    /// Prefix vectors per layer (MAM only).
    #[serde(default = "default_prefix_len")]
    pub prefix_len: usize,
    #[serde(default)]
    pub init: AdapterInit,
}

fn default_alpha() -> f64 {
    16.0
}

fn default_prefix_len() -> usize {
    8
}

impl AdapterSpec {
    pub fn new(variant: AdapterVariant, r: usize) -> Self {
        AdapterSpec {
            variant,
            r,
            lora_alpha: default_alpha(),
            prefix_len: default_prefix_len(),
            init: AdapterInit::default(),
        }
    }

    pub fn houlsby(r: usize) -> Self {
        Self::new(AdapterVariant::Houlsby, r)
    }

    pub fn scaling(&self) -> f64 {
        self.lora_alpha / self.r as f64
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.r == 0 {
            return Err(Error::InvalidConfig("adapter.r must be >= 1".into()));
        }
        if self.r >= d_model {
            return Err(Error::InvalidConfig(format!(
                "adapter.r ({}) must be smaller than d_model ({d_model})",
                self.r
            )));
        }
        if !(self.init.gaussian_std > 0.0 && self.init.gaussian_std.is_finite()) {
            return Err(Error::InvalidConfig("adapter.init.gaussian_std must be > 0".into()));
        }
        if !self.lora_alpha.is_finite() {
            return Err(Error::InvalidConfig("adapter.lora_alpha must be finite".into()));
        }
        if self.variant == AdapterVariant::Mam && self.prefix_len == 0 {
            return Err(Error::InvalidConfig("adapter.prefix_len must be >= 1 for mam".into()));
        }
        Ok(())
    }
}

/// One adapter location inside layer `layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterSite {
    AttentionOutput { layer: usize },
    FfnOutput { layer: usize },
    FfnParallel { layer: usize },
    LoraQuery { layer: usize },
    LoraValue { layer: usize },
}

impl AdapterSite {
    /// Prefix shared by the site's parameter group names.
    pub fn prefix(self) -> String {
        match self {
            AdapterSite::AttentionOutput { layer } => format!("layer{layer}.attn.adapter"),
            AdapterSite::FfnOutput { layer } | AdapterSite::FfnParallel { layer } => {
                format!("layer{layer}.ffn.adapter")
            }
            AdapterSite::LoraQuery { layer } => format!("layer{layer}.attn.q"),
            AdapterSite::LoraValue { layer } => format!("layer{layer}.attn.v"),
        }
    }

    fn base_projection(self) -> Option<(String, String)> {
        match self {
            AdapterSite::LoraQuery { layer } => {
                Some((format!("layer{layer}.attn.wq"), format!("layer{layer}.attn.bq")))
            }
            AdapterSite::LoraValue { layer } => {
                Some((format!("layer{layer}.attn.wv"), format!("layer{layer}.attn.bv")))
            }
            _ => None,
        }
    }
}

/// Every adapter site `spec` creates in an `n_layers` encoder.
pub fn adapter_sites(spec: &AdapterSpec, n_layers: usize) -> Vec<AdapterSite> {
    let mut sites = Vec::new();
    for layer in 0..n_layers {
        match spec.variant {
            AdapterVariant::Houlsby => {
                sites.push(AdapterSite::AttentionOutput { layer });
                sites.push(AdapterSite::FfnOutput { layer });
            }
            AdapterVariant::Pfeiffer => sites.push(AdapterSite::FfnOutput { layer }),
            AdapterVariant::Lora => {
                sites.push(AdapterSite::LoraQuery { layer });
                sites.push(AdapterSite::LoraValue { layer });
            }
            AdapterVariant::Mam => sites.push(AdapterSite::FfnParallel { layer }),
        }
    }
    sites
}

fn adapter_group(name: String, tensor: Tensor, prunable: bool, n_in: usize, n_out: usize) -> ParamGroup {
    ParamGroup { name, tensor, trainable: true, prunable, n_in, n_out, role: GroupRole::Adapter }
}

/// Adds the adapter groups described by `spec`. Weight matrices are
/// registered prunable; biases and prefix vectors are not.
pub fn insert_adapters(model: &mut Model, spec: &AdapterSpec, seed: u64) -> Result<()> {
    if model.adapter_spec().is_some() {
        return Err(Error::AdaptersPresent);
    }
    let d = model.config().d_model;
    spec.validate(d)?;
    let (r, std) = (spec.r, spec.init.gaussian_std);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();

    for site in adapter_sites(spec, model.config().n_layers) {
        let p = site.prefix();
        match site {
            AdapterSite::LoraQuery { .. } | AdapterSite::LoraValue { .. } => {
                groups.push(adapter_group(format!("{p}.lora_a"), gaussian(&mut rng, vec![d, r], std), true, d, r));
                let b = if spec.init.lora_zero_init {
                    constant(vec![r, d], 0.0)
                } else {
                    gaussian(&mut rng, vec![r, d], std)
                };
                groups.push(adapter_group(format!("{p}.lora_b"), b, true, r, d));
            }
            _ => {
                groups.push(adapter_group(format!("{p}.down"), gaussian(&mut rng, vec![d, r], std), true, d, r));
                groups.push(adapter_group(format!("{p}.down_bias"), constant(vec![r], 0.0), false, 1, r));
                groups.push(adapter_group(format!("{p}.up"), gaussian(&mut rng, vec![r, d], std), true, r, d));
                groups.push(adapter_group(format!("{p}.up_bias"), constant(vec![d], 0.0), false, 1, d));
            }
        }
    }
    if spec.variant.has_prefix() {
        for layer in 0..model.config().n_layers {
            for kv in ["prefix_k", "prefix_v"] {
                let t = gaussian(&mut rng, vec![spec.prefix_len, d], std);
                groups.push(adapter_group(format!("layer{layer}.attn.{kv}"), t, false, 1, d));
            }
        }
    }
    for g in groups {
        model.push_group(g)?;
    }
    model.set_adapter_spec(spec.clone());
    Ok(())
}

/// Residual bottleneck `x + gelu(x·W_down + b_down)·W_up + b_up`.
pub(crate) fn bottleneck_on<S: Scalar>(tape: &mut Tape<S>, p: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let delta = bottleneck_delta(tape, p, prefix, x)?;
    tape.add(x, delta)
}

fn bottleneck_delta<S: Scalar>(tape: &mut Tape<S>, p: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.affine(x, p.get(&format!("{prefix}.down"))?, p.get(&format!("{prefix}.down_bias"))?)?;
    let h = tape.gelu(h)?;
    tape.affine(h, p.get(&format!("{prefix}.up"))?, p.get(&format!("{prefix}.up_bias"))?)
}

/// `base + (α/r)·bottleneck(x)` without the inner residual (MAM's parallel
/// adapter beside the FFN).
pub(crate) fn parallel_on<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bindings,
    prefix: &str,
    spec: &AdapterSpec,
    x: Var,
    base: Var,
) -> Result<Var> {
    let delta = bottleneck_delta(tape, p, prefix, x)?;
    let delta = tape.scale(delta, spec.scaling())?;
    tape.add(base, delta)
}

/// `base + (α/r)·(x·A)·B`.
pub(crate) fn lora_on<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bindings,
    prefix: &str,
    spec: &AdapterSpec,
    x: Var,
    base: Var,
) -> Result<Var> {
    let xa = tape.matmul(x, p.get(&format!("{prefix}.lora_a"))?)?;
    let xab = tape.matmul(xa, p.get(&format!("{prefix}.lora_b"))?)?;
    let delta = tape.scale(xab, spec.scaling())?;
    tape.add(base, delta)
}

/// Applies one adapter site of `model` to rows `x` (`[n, d_model]`).
///
/// Bottleneck sites return `x + gelu(x·W_down + b_down)·W_up + b_up`; MAM's
/// parallel site returns only its scaled bottleneck branch; LoRA sites return
/// the adapted projection `x·W + b + (α/r)·x·A·B`.
pub fn adapter_forward(model: &Model, site: AdapterSite, x: &Tensor) -> Result<Tensor> {
    let spec = model.adapter_spec().ok_or_else(|| Error::Contract("model has no adapters".into()))?;
    let d = model.config().d_model;
    if x.shape().len() != 2 || x.cols() != d {
        return Err(Error::shape("adapter_forward input", &[x.rows(), d], x.shape()));
    }
    if !adapter_sites(spec, model.config().n_layers).contains(&site) {
        return Err(Error::Contract(format!("site {site:?} not present for {}", spec.variant.name())));
    }
    let prefix = site.prefix();
    let mut ps = ParamSet::new();
    for g in model.groups().iter().filter(|g| g.name.starts_with(&prefix)) {
        ps.insert(g.name.clone(), g.tensor.clone(), false);
    }
    if let Some((w, b)) = site.base_projection() {
        for n in [w, b] {
            let g = model.group(&n).expect("base projection exists");
            ps.insert(n, g.tensor.clone(), false);
        }
    }

    let mut tape = Tape::<f64>::new();
    let bindings = Bindings::from_params(&mut tape, &ps)?;
    let xv = tape.constant(x.clone())?;
    let out = match site {
        AdapterSite::AttentionOutput { .. } | AdapterSite::FfnOutput { .. } => bottleneck_on(&mut tape, &bindings, &prefix, xv)?,
        AdapterSite::FfnParallel { .. } => {
            let delta = bottleneck_delta(&mut tape, &bindings, &prefix, xv)?;
            tape.scale(delta, spec.scaling())?
        }
        AdapterSite::LoraQuery { .. } | AdapterSite::LoraValue { .. } => {
            let (w, b) = site.base_projection().expect("lora site");
            let base = tape.affine(xv, bindings.get(&w)?, bindings.get(&b)?)?;
            lora_on(&mut tape, &bindings, &prefix, spec, xv, base)?
        }
    };
    Ok(tape.value(out).clone())
}

/// Parameter counts by role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total_backbone: usize,
    /// All adapter parameters: weights, biases and prefix vectors.
    pub adapter_total: usize,
    /// `adapter_total` minus masked-out weights.
    pub adapter_kept: usize,
    pub head: usize,
    /// `adapter_kept / (total_backbone + adapter_total + head)`.
    pub fraction_kept: f64,
    /// Prunable adapter weights.
    pub prunable_total: usize,
    pub prunable_kept: usize,
    /// `prunable_kept / total`: the share the sparse ratio acts on.
    pub weight_fraction_kept: f64,
    /// `(adapter_kept + head) / total`.
    pub fraction_kept_with_head: f64,
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.total_backbone + self.adapter_total + self.head
    }
}

pub fn trainable_param_report(model: &Model) -> ParamReport {
    let count = |role: GroupRole| -> usize {
        model.groups().iter().filter(|g| g.role == role).map(|g| g.len()).sum()
    };
    let (total_backbone, adapter_total, head) =
        (count(GroupRole::Backbone), count(GroupRole::Adapter), count(GroupRole::Head));
    let prunable_total: usize = model.prunable_groups().map(|g| g.len()).sum();
    let pruned = model.mask().map_or(0, |m| m.total() - m.kept());
    let adapter_kept = adapter_total - pruned;
    let prunable_kept = prunable_total - pruned;
    let total = (total_backbone + adapter_total + head) as f64;
    ParamReport {
        total_backbone,
        adapter_total,
        adapter_kept,
        head,
        fraction_kept: adapter_kept as f64 / total,
        prunable_total,
        prunable_kept,
        weight_fraction_kept: prunable_kept as f64 / total,
        fraction_kept_with_head: (adapter_kept + head) as f64 / total,
    }
}

/// Bottleneck scaled by `k` with sparsity `1 − 1/k`, keeping the kept
/// weight count of the unscaled dense adapter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LargeSparseConfig {
    pub r_base: usize,
    pub scale_k: usize,
    pub r: usize,
    pub s: f64,
}

pub fn large_sparse_config(r_base: usize, k: usize) -> Result<LargeSparseConfig> {
    if k < 1 {
        return Err(Error::InvalidConfig("large-sparse scale k must be >= 1".into()));
    }
    if r_base < 1 {
        return Err(Error::InvalidConfig("large-sparse r_base must be >= 1".into()));
    }
    Ok(LargeSparseConfig { r_base, scale_k: k, r: k * r_base, s: 1.0 - 1.0 / k as f64 })
}

#[cfg(test)]
mod tests;
