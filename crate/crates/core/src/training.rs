//! Masked fine-tuning: AdamW with linear warmup and decay, frozen backbone,
//! and pruned positions held at zero.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::trainable_param_report;
use crate::autodiff::{Bindings, GradMap, Tape, Tensor};
use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Shuffling seed.
    pub seed: u64,
    /// Evaluate every this many steps; `None` evaluates at each epoch end.
    pub eval_every: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.1,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            eval_every: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("optimizer.{m}")));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be > 0 and weight_decay >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.eval_every == Some(0) {
            return bad("eval_every must be >= 1");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.epochs * self.steps_per_epoch(n_train)
    }
}

/// Learning rate at `step` of `total_steps`: linear from 0 to `peak_lr` over
/// the first `⌈warmup_fraction·total⌉` steps, then linear to 0.
pub fn lr_at(step: usize, total_steps: usize, cfg: &OptimizerConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Contract(format!("step {step} beyond total_steps {total_steps}")));
    }
    let warmup = (cfg.warmup_fraction * total_steps as f64).ceil() as usize;
    Ok(if step < warmup {
        cfg.peak_lr * step as f64 / warmup as f64
    } else if total_steps == warmup {
        cfg.peak_lr
    } else {
        cfg.peak_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    })
}

/// First and second moments per trainable group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One AdamW update of every trainable group in `grads`. Masked weights and
/// both of their moments are zeroed afterwards; frozen groups are skipped.
pub fn masked_adam_step(
    model: &mut Model,
    grads: &GradMap,
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let group = model.group(name).ok_or_else(|| Error::Contract(format!("gradient for unknown group `{name}`")))?;
        if group.shape() != g.shape() {
            return Err(Error::shape(format!("gradient `{name}`"), group.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    let mask = model.mask().cloned();

    for (name, g) in grads {
        let group = model.group_mut(name).expect("checked above");
        if !group.trainable {
            continue;
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        if m.len() != g.len() {
            return Err(Error::shape(format!("adam state `{name}`"), &[m.len()], &[g.len()]));
        }
        let w = group.tensor.data_mut();
        for i in 0..w.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps) + cfg.weight_decay * w[i];
            w[i] -= lr * update;
        }
        if let Some(bits) = mask.as_ref().and_then(|mk| mk.get(name)) {
            for (i, &keep) in bits.iter().enumerate() {
                if !keep {
                    w[i] = 0.0;
                    m[i] = 0.0;
                    v[i] = 0.0;
                }
            }
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "adam update" });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub kept_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<StepRecord>,
}

/// Final numbers of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub final_eval_loss: Option<f64>,
    pub final_eval_accuracy: Option<f64>,
    pub best_eval_accuracy: Option<f64>,
    pub kept_fraction: f64,
    /// First eval step reaching each accuracy level (keys formatted `0.50`).
    pub steps_to_threshold: BTreeMap<String, Option<usize>>,
}

pub const CSV_HEADER: &str = "step,split,loss,accuracy,lr,kept_fraction";

impl RunMetrics {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn evals(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter(|r| r.split == Split::Eval)
    }

    pub fn final_eval(&self) -> Option<&StepRecord> {
        self.evals().last()
    }

    /// Step of the first evaluation with accuracy ≥ `accuracy`.
    pub fn steps_to_threshold(&self, accuracy: f64) -> Option<usize> {
        self.evals().find(|r| r.accuracy >= accuracy).map(|r| r.step)
    }

    pub fn summary(&self) -> RunSummary {
        let last = self.final_eval();
        let steps_to_threshold = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95]
            .into_iter()
            .map(|a| (format!("{a:.2}"), self.steps_to_threshold(a)))
            .collect();
        RunSummary {
            steps: self.records.iter().map(|r| r.step).max().unwrap_or(0),
            final_eval_loss: last.map(|r| r.loss),
            final_eval_accuracy: last.map(|r| r.accuracy),
            best_eval_accuracy: self.evals().map(|r| r.accuracy).reduce(f64::max),
            kept_fraction: self.records.first().map_or(0.0, |r| r.kept_fraction),
            steps_to_threshold,
        }
    }

    /// Writes the metrics stream. Floats use Rust's shortest round-trip
    /// formatting, so equal runs give equal bytes.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.records {
            writeln!(w, "{},{},{},{},{},{}", r.step, r.split.name(), r.loss, r.accuracy, r.lr, r.kept_fraction)?;
        }
        Ok(())
    }
}

fn accuracy_count(logits: &Tensor, batch: &[Example]) -> usize {
    let c = logits.cols();
    batch
        .iter()
        .enumerate()
        .filter(|(i, ex)| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let argmax = (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            argmax == ex.label
        })
        .count()
}

fn check_labels(model: &Model, ds: &Dataset) -> Result<()> {
    let c = model.config().n_classes;
    if let Some(ex) = ds.examples.iter().find(|e| e.label >= c) {
        return Err(Error::Contract(format!("label {} outside the model's {c} classes", ex.label)));
    }
    Ok(())
}

/// Mean cross-entropy and accuracy over `data`. Does not modify `model`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    evaluate_batched(model, data, 64)
}

fn evaluate_batched(model: &Model, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_labels(model, data)?;
    let (mut loss, mut correct) = (0.0, 0);
    for batch in data.chunks(batch_size) {
        let logits = model.logits(batch)?;
        let c = logits.cols();
        for (i, ex) in batch.iter().enumerate() {
            let row = &logits.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[ex.label];
        }
        correct += accuracy_count(&logits, batch);
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Loss, accuracy and gradient on one mini-batch.
fn batch_step(model: &Model, batch: &[Example]) -> Result<(f64, f64, GradMap)> {
    let mut tape = Tape::<f64>::new();
    let p = Bindings::from_params(&mut tape, &model.param_set())?;
    let logits = model.forward_on(&mut tape, &p, batch)?;
    let ce = tape.cross_entropy(logits, batch.iter().map(|e| e.label).collect())?;
    let grads = tape.backward(ce)?;
    let acc = accuracy_count(tape.value(logits), batch) as f64 / batch.len() as f64;
    Ok((tape.value(ce).data()[0], acc, grads))
}

/// Trains the trainable groups of `model` on `train_data`, evaluating on
/// `eval_data`. The registered mask, if any, is enforced after every update.
/// Deterministic in `cfg.seed`.
pub fn train(model: &mut Model, train_data: &Dataset, eval_data: &Dataset, cfg: &OptimizerConfig) -> Result<RunMetrics> {
    train_with_state(model, train_data, eval_data, cfg).map(|(m, _)| m)
}

/// [`train`], also returning the final optimizer state.
pub fn train_with_state(
    model: &mut Model,
    train_data: &Dataset,
    eval_data: &Dataset,
    cfg: &OptimizerConfig,
) -> Result<(RunMetrics, AdamState)> {
    cfg.validate()?;
    if train_data.is_empty() || eval_data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_labels(model, train_data)?;
    check_labels(model, eval_data)?;
    if model.trainable_groups().next().is_none() {
        return Err(Error::Contract("model has no trainable groups".into()));
    }
    if let Some(mask) = model.mask() {
        mask.check_against(model)?;
    }

    let kept_fraction = trainable_param_report(model).weight_fraction_kept;
    let total = cfg.total_steps(train_data.len());
    let per_epoch = cfg.steps_per_epoch(train_data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new();
    let mut metrics = RunMetrics::default();
    let mut step = 0;

    for _ in 0..cfg.epochs {
        for batch in train_data.shuffled_batches(cfg.batch_size, &mut rng) {
            step += 1;
            let lr = lr_at(step, total, cfg)?;
            let (loss, acc, grads) = batch_step(model, &batch).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence { step, loss: f64::NAN },
                e => e,
            })?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            masked_adam_step(model, &grads, &mut state, cfg, lr).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence { step, loss },
                e => e,
            })?;
            metrics.records.push(StepRecord { step, split: Split::Train, loss, accuracy: acc, lr, kept_fraction });

            let due = match cfg.eval_every {
                Some(k) => step % k == 0 || step == total,
                None => step % per_epoch == 0,
            };
            if due {
                let (loss, accuracy) = evaluate(model, eval_data)?;
                metrics.records.push(StepRecord { step, split: Split::Eval, loss, accuracy, lr, kept_fraction });
            }
        }
    }
    Ok((metrics, state))
}

#[cfg(test)]
mod tests;
