//! Pruning at initialization.
//!
//! Every score function returns a [`ScoreMap`] in canonical orientation
//! (higher is kept). [`prune_by_percentile`] keeps the top
//! `round_half_up((1 − s)·N)` elements under one global threshold, breaking
//! ties by ascending `(group name, element index)`. ER builds its mask
//! directly from per-group allocations.

mod maskfile;

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient, hvp, Objective, ParamSet, Tensor};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{ClassificationLoss, Model};

pub use maskfile::{read_mask, write_mask, MASK_MAGIC, MASK_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    Random,
    Magnitude,
    Er,
    Snip,
    Grasp,
}

impl PruneMethod {
    pub const ALL: [PruneMethod; 5] =
        [PruneMethod::Random, PruneMethod::Magnitude, PruneMethod::Er, PruneMethod::Snip, PruneMethod::Grasp];

    pub fn name(self) -> &'static str {
        match self {
            PruneMethod::Random => "random",
            PruneMethod::Magnitude => "magnitude",
            PruneMethod::Er => "er",
            PruneMethod::Snip => "snip",
            PruneMethod::Grasp => "grasp",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            PruneMethod::Random => 0,
            PruneMethod::Magnitude => 1,
            PruneMethod::Er => 2,
            PruneMethod::Snip => 3,
            PruneMethod::Grasp => 4,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        PruneMethod::ALL.into_iter().find(|m| m.tag() == tag)
    }
}

impl std::str::FromStr for PruneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PruneMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown prune method `{s}`")))
    }
}

impl std::fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Canonical importance per prunable group. Higher is kept.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    method: PruneMethod,
    seed: u64,
    scores: BTreeMap<String, Tensor>,
}

impl ScoreMap {
    /// Wraps externally computed scores. All values must be finite.
    pub fn new(method: PruneMethod, seed: u64, scores: BTreeMap<String, Tensor>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::NoPrunableGroups);
        }
        if let Some((name, _)) = scores.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::Scoring {
                method: method.name(),
                source: Box::new(Error::Contract(format!("non-finite score in `{name}`"))),
            });
        }
        Ok(ScoreMap { method, seed, scores })
    }

    pub fn method(&self) -> PruneMethod {
        self.method
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.scores.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.scores.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total(&self) -> usize {
        self.scores.values().map(Tensor::len).sum()
    }
}

/// Immutable binary mask over the prunable groups (`true` = kept).
#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    method: PruneMethod,
    s: f64,
    seed: u64,
    threshold: Option<f64>,
    bits: BTreeMap<String, Vec<bool>>,
}

/// `round((1 − s)·n)` with halves rounded up.
pub fn kept_count(s: f64, n: usize) -> usize {
    let exact = (1.0 - s) * n as f64;
    ((exact + 0.5).floor() as usize).min(n)
}

fn check_s(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::InvalidConfig(format!("sparsity s = {s} must lie in [0, 1)")));
    }
    Ok(())
}

impl PruneMask {
    /// Builds a mask from explicit bits. The threshold is unknown.
    pub fn from_bits(method: PruneMethod, s: f64, seed: u64, bits: BTreeMap<String, Vec<bool>>) -> Result<Self> {
        check_s(s)?;
        if bits.is_empty() {
            return Err(Error::NoPrunableGroups);
        }
        Ok(PruneMask { method, s, seed, threshold: None, bits })
    }

    /// All-ones mask over `model`'s prunable groups.
    pub fn dense(model: &Model) -> Result<Self> {
        let bits = model.prunable_groups().map(|g| (g.name.clone(), vec![true; g.len()])).collect();
        Self::from_bits(PruneMethod::Random, 0.0, 0, bits)
    }

    pub fn method(&self) -> PruneMethod {
        self.method
    }

    /// Target sparsity the mask was built for.
    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Lowest kept score, for percentile masks built in this process.
    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn get(&self, name: &str) -> Option<&[bool]> {
        self.bits.get(name).map(Vec::as_slice)
    }

    pub fn groups(&self) -> impl Iterator<Item = (&str, &[bool])> {
        self.bits.iter().map(|(n, b)| (n.as_str(), b.as_slice()))
    }

    pub fn n_groups(&self) -> usize {
        self.bits.len()
    }

    pub fn total(&self) -> usize {
        self.bits.values().map(Vec::len).sum()
    }

    pub fn kept(&self) -> usize {
        self.bits.values().map(|b| b.iter().filter(|&&x| x).count()).sum()
    }

    pub fn group_kept(&self, name: &str) -> Option<usize> {
        self.get(name).map(|b| b.iter().filter(|&&x| x).count())
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept() as f64 / self.total() as f64
    }

    /// Checks that keys and element counts equal `model`'s prunable groups.
    pub fn check_against(&self, model: &Model) -> Result<()> {
        for g in model.prunable_groups() {
            match self.bits.get(&g.name) {
                None => return Err(Error::MaskMismatch { group: g.name.clone(), reason: "missing from mask".into() }),
                Some(b) if b.len() != g.len() => {
                    return Err(Error::MaskMismatch {
                        group: g.name.clone(),
                        reason: format!("mask has {} elements, group has {}", b.len(), g.len()),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(name) = self.bits.keys().find(|n| model.group(n).is_none_or(|g| !g.prunable)) {
            return Err(Error::MaskMismatch { group: name.clone(), reason: "not a prunable group of the model".into() });
        }
        Ok(())
    }
}

fn prunable_names(model: &Model) -> Result<Vec<String>> {
    let names: Vec<String> = model.prunable_groups().map(|g| g.name.clone()).collect();
    if names.is_empty() {
        return Err(Error::NoPrunableGroups);
    }
    Ok(names)
}

/// I.i.d. Uniform(0, 1) scores drawn in sorted group-name order.
pub fn score_random(model: &Model, seed: u64) -> Result<ScoreMap> {
    let mut names = prunable_names(model)?;
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = names
        .into_iter()
        .map(|n| {
            let shape = model.group(&n).expect("prunable group").shape().to_vec();
            (n, Tensor::from_fn(shape, |_| rng.random::<f64>()))
        })
        .collect();
    ScoreMap::new(PruneMethod::Random, seed, scores)
}

/// `|w|`.
pub fn score_magnitude(model: &Model) -> Result<ScoreMap> {
    let scores = prunable_names(model)?
        .into_iter()
        .map(|n| {
            let g = model.group(&n).expect("prunable group");
            let data = g.tensor.data().iter().map(|w| w.abs()).collect();
            (n, Tensor::new(g.shape().to_vec(), data).expect("same shape"))
        })
        .collect();
    ScoreMap::new(PruneMethod::Magnitude, 0, scores)
}

fn product(a: &Tensor, b: &Tensor, abs: bool) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| if abs { (x * y).abs() } else { x * y }).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn scoring<T>(method: PruneMethod, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Scoring { method: method.name(), source: Box::new(e) })
}

/// SNIP importance `w ⊙ g` (or `|w ⊙ g|` with `snip_abs`) for the named
/// entries of `params`; the raw SNIP score is its negation. `g` is the
/// gradient of `obj` over every differentiated entry.
pub fn score_snip_objective<O: Objective>(
    obj: &O,
    params: &ParamSet,
    prunable: &[String],
    snip_abs: bool,
) -> Result<ScoreMap> {
    let m = PruneMethod::Snip;
    let (_, g) = scoring(m, gradient(obj, params))?;
    let scores = scoring(m, importance(params, &g, prunable, snip_abs))?;
    ScoreMap::new(m, 0, scores)
}

/// GraSP importance `w ⊙ (H g)`; the raw GraSP score is its negation.
pub fn score_grasp_objective<O: Objective>(obj: &O, params: &ParamSet, prunable: &[String]) -> Result<ScoreMap> {
    let m = PruneMethod::Grasp;
    let (_, g) = scoring(m, gradient(obj, params))?;
    let h = scoring(m, hvp(obj, params, &g))?;
    let scores = scoring(m, importance(params, &h, prunable, false))?;
    ScoreMap::new(m, 0, scores)
}

fn importance(params: &ParamSet, d: &BTreeMap<String, Tensor>, names: &[String], abs: bool) -> Result<BTreeMap<String, Tensor>> {
    names
        .iter()
        .map(|n| {
            let w = params.get(n).ok_or_else(|| Error::Contract(format!("unknown parameter `{n}`")))?;
            let g = d.get(n).ok_or_else(|| Error::Contract(format!("parameter `{n}` is not differentiated")))?;
            let t = product(w, g, abs);
            if !t.all_finite() {
                return Err(Error::NonFinite { op: "score" });
            }
            Ok((n.clone(), t))
        })
        .collect()
}

/// SNIP on the model's classification loss, gradients summed over `batches`.
pub fn score_snip(model: &Model, batches: &[&[Example]], snip_abs: bool) -> Result<ScoreMap> {
    let names = prunable_names(model)?;
    if batches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    score_snip_objective(&ClassificationLoss { model, batches }, &model.param_set(), &names, snip_abs)
}

/// GraSP on the model's classification loss. The Hessian-gradient product
/// uses the gradient over all trainable groups as its direction.
pub fn score_grasp(model: &Model, batches: &[&[Example]]) -> Result<ScoreMap> {
    let names = prunable_names(model)?;
    if batches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    score_grasp_objective(&ClassificationLoss { model, batches }, &model.param_set(), &names)
}

/// Global-threshold mask keeping the top `round_half_up((1 − s)·N)` scores.
pub fn prune_by_percentile(scores: &ScoreMap, s: f64) -> Result<PruneMask> {
    check_s(s)?;
    // BTreeMap order makes the flat index ascend in (group name, element index).
    // `+ 0.0` folds −0 into +0 so signed zeros tie.
    let flat: Vec<f64> = scores.scores.values().flat_map(|t| t.data().iter().map(|x| x + 0.0)).collect();
    let keep = kept_count(s, flat.len());
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_unstable_by(|&a, &b| flat[b].total_cmp(&flat[a]).then(a.cmp(&b)));
    let mut keep_flat = vec![false; flat.len()];
    for &i in &order[..keep] {
        keep_flat[i] = true;
    }
    let threshold = keep.checked_sub(1).map(|last| flat[order[last]]);

    let mut bits = BTreeMap::new();
    let mut offset = 0;
    for (name, t) in &scores.scores {
        bits.insert(name.clone(), keep_flat[offset..offset + t.len()].to_vec());
        offset += t.len();
    }
    Ok(PruneMask { method: scores.method, s, seed: scores.seed, threshold, bits })
}

/// ER allocation factor `1 − (n_in + n_out)/(n_in·n_out)`.
pub fn er_factor(n_in: usize, n_out: usize) -> f64 {
    1.0 - (n_in + n_out) as f64 / (n_in * n_out) as f64
}

/// Per-group sparsities `ε·factor`, with `ε` solved so the total pruned
/// count matches `round_half_up(s_global·N)`'s complement. Each group is
/// capped at `1 − 1/n` (one weight survives); capped groups leave the solve
/// and `ε` is recomputed until no new cap binds.
pub fn er_sparsities(groups: &[(usize, usize)], s_global: f64) -> Result<Vec<f64>> {
    check_s(s_global)?;
    if groups.is_empty() {
        return Err(Error::NoPrunableGroups);
    }
    if let Some(&(a, b)) = groups.iter().find(|(a, b)| *a == 0 || *b == 0) {
        return Err(Error::InvalidConfig(format!("group shape {a}×{b} has a zero dimension")));
    }
    let sizes: Vec<f64> = groups.iter().map(|&(a, b)| (a * b) as f64).collect();
    let factors: Vec<f64> = groups.iter().map(|&(a, b)| er_factor(a, b).max(0.0)).collect();
    let caps: Vec<f64> = sizes.iter().map(|n| 1.0 - 1.0 / n).collect();
    let n_total: f64 = sizes.iter().sum();
    let pruned = n_total - kept_count(s_global, n_total as usize) as f64;
    if pruned == 0.0 {
        return Ok(vec![0.0; groups.len()]);
    }

    let mut capped = vec![false; groups.len()];
    loop {
        let fixed: f64 = (0..groups.len()).filter(|&i| capped[i]).map(|i| caps[i] * sizes[i]).sum();
        let weight: f64 = (0..groups.len()).filter(|&i| !capped[i]).map(|i| factors[i] * sizes[i]).sum();
        let remaining = pruned - fixed;
        if weight <= 0.0 {
            if remaining <= 1e-9 {
                break;
            }
            let max_s = 1.0 - (n_total - fixed) / n_total;
            return Err(Error::Infeasible(format!(
                "s = {s_global} exceeds the largest ER-allocatable sparsity {max_s:.6}"
            )));
        }
        let eps = remaining / weight;
        let newly: Vec<usize> =
            (0..groups.len()).filter(|&i| !capped[i] && eps * factors[i] > caps[i]).collect();
        if newly.is_empty() {
            return Ok((0..groups.len()).map(|i| if capped[i] { caps[i] } else { eps * factors[i] }).collect());
        }
        for i in newly {
            capped[i] = true;
        }
    }
    Ok((0..groups.len()).map(|i| if capped[i] { caps[i] } else { 0.0 }).collect())
}

/// Random topology per group at the ER allocation. Groups are visited in
/// sorted name order and each keeps exactly `round_half_up((1 − sᵍ)·nᵍ)`.
pub fn score_er(model: &Model, s_global: f64, seed: u64) -> Result<PruneMask> {
    let mut names = prunable_names(model)?;
    names.sort();
    let shapes: Vec<(usize, usize)> = names
        .iter()
        .map(|n| {
            let g = model.group(n).expect("prunable group");
            (g.n_in, g.n_out)
        })
        .collect();
    let sparsities = er_sparsities(&shapes, s_global)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = BTreeMap::new();
    for (name, sg) in names.into_iter().zip(sparsities) {
        let n = model.group(&name).expect("prunable group").len();
        let mut b = vec![false; n];
        for i in sample(&mut rng, n, kept_count(sg, n)) {
            b[i] = true;
        }
        bits.insert(name, b);
    }
    Ok(PruneMask { method: PruneMethod::Er, s: s_global, seed, threshold: None, bits })
}

/// Zeroes masked weights and registers the mask for the optimizer.
pub fn apply_mask(model: &mut Model, mask: &PruneMask) -> Result<()> {
    mask.check_against(model)?;
    for (name, bits) in &mask.bits {
        let g = model.group_mut(name).expect("checked");
        for (w, &keep) in g.tensor.data_mut().iter_mut().zip(bits) {
            if !keep {
                *w = 0.0;
            }
        }
    }
    model.set_mask(mask.clone());
    Ok(())
}

/// Pruning settings carried by an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub method: PruneMethod,
    pub s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub snip_abs: bool,
    /// Mini-batches used by SNIP and GraSP.
    #[serde(default = "one")]
    pub score_batches: usize,
}

fn one() -> usize {
    1
}

impl PruneConfig {
    pub fn new(method: PruneMethod, s: f64, seed: u64) -> Self {
        PruneConfig { method, s, seed, snip_abs: false, score_batches: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        check_s(self.s)?;
        if self.score_batches == 0 {
            return Err(Error::InvalidConfig("prune.score_batches must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scores `model` with `cfg.method` and thresholds at `cfg.s`. `batches`
/// feed SNIP and GraSP; the first `cfg.score_batches` are used.
pub fn build_mask(model: &Model, cfg: &PruneConfig, batches: &[&[Example]]) -> Result<PruneMask> {
    cfg.validate()?;
    let batches = &batches[..cfg.score_batches.min(batches.len())];
    let scores = match cfg.method {
        PruneMethod::Er => return score_er(model, cfg.s, cfg.seed),
        PruneMethod::Random => score_random(model, cfg.seed)?,
        PruneMethod::Magnitude => score_magnitude(model)?,
        PruneMethod::Snip => score_snip(model, batches, cfg.snip_abs)?,
        PruneMethod::Grasp => score_grasp(model, batches)?,
    };
    let mut mask = prune_by_percentile(&scores, cfg.s)?;
    mask.seed = cfg.seed;
    Ok(mask)
}
