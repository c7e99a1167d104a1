//! Subcommand implementations. Each returns a report; printing is left to
//! the binary.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sparse_adapter::adapters::{insert_adapters, trainable_param_report, ParamReport};
use sparse_adapter::data::{Dataset, Example};
use sparse_adapter::model::{build_encoder, freeze_backbone, read_checkpoint, write_checkpoint, Model};
use sparse_adapter::pruning::{apply_mask, build_mask, er_sparsities, read_mask, write_mask, PruneMask, PruneMethod};
use sparse_adapter::training::{evaluate, train, RunMetrics, RunSummary};

pub const OUT_ENV: &str = "SPARSEADAPTER_OUT";
pub const MASK_FILE: &str = "mask.sadm";
pub const CHECKPOINT_FILE: &str = "checkpoint.sacp";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";

use crate::config::ExperimentConfig;

/// Output directory: `SPARSEADAPTER_OUT`, then `--out`, then the config.
pub fn resolve_out(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag.map_or_else(|| cfg.output_dir.clone(), Path::to_path_buf),
    }
}

/// Frozen encoder with freshly initialized adapters.
pub fn build_model(cfg: &ExperimentConfig) -> Result<Model> {
    let mut model = build_encoder(&cfg.encoder, cfg.backbone_seed())?;
    freeze_backbone(&mut model);
    insert_adapters(&mut model, &cfg.adapter, cfg.adapter_seed())?;
    Ok(model)
}

/// The leading training chunks used by gradient-based scores.
pub fn scoring_batches<'a>(cfg: &ExperimentConfig, train: &'a Dataset) -> Vec<&'a [Example]> {
    let n = cfg.prune.as_ref().map_or(1, |p| p.score_batches);
    train.chunks(cfg.optimizer.batch_size).take(n).collect()
}

fn compute_mask(cfg: &ExperimentConfig, model: &Model, train: &Dataset) -> Result<Option<PruneMask>> {
    let Some(p) = &cfg.prune else { return Ok(None) };
    Ok(Some(build_mask(model, p, &scoring_batches(cfg, train))?))
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub shape: Vec<usize>,
    pub kept: usize,
    pub total: usize,
    pub sparsity: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MaskReport {
    pub method: PruneMethod,
    pub s: f64,
    pub seed: u64,
    pub kept: usize,
    pub total: usize,
    pub global_sparsity: f64,
    pub groups: Vec<GroupReport>,
    /// ER target allocation per group, in group order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub er_allocation: Option<Vec<f64>>,
}

impl MaskReport {
    /// Shapes come from `model` when available; a bare file only knows
    /// element counts.
    pub fn new(mask: &PruneMask, model: Option<&Model>) -> Self {
        let groups: Vec<GroupReport> = mask
            .groups()
            .map(|(name, bits)| {
                let kept = bits.iter().filter(|&&b| b).count();
                let shape = model
                    .and_then(|m| m.group(name))
                    .map_or_else(|| vec![bits.len()], |g| g.shape().to_vec());
                GroupReport {
                    name: name.to_string(),
                    shape,
                    kept,
                    total: bits.len(),
                    sparsity: 1.0 - kept as f64 / bits.len() as f64,
                }
            })
            .collect();
        let er_allocation = match (mask.method(), model) {
            (PruneMethod::Er, Some(m)) => {
                let shapes: Vec<(usize, usize)> = groups
                    .iter()
                    .map(|g| m.group(&g.name).map_or((1, g.total), |p| (p.n_in, p.n_out)))
                    .collect();
                er_sparsities(&shapes, mask.s()).ok()
            }
            _ => None,
        };
        MaskReport {
            method: mask.method(),
            s: mask.s(),
            seed: mask.seed(),
            kept: mask.kept(),
            total: mask.total(),
            global_sparsity: 1.0 - mask.kept_fraction(),
            groups,
            er_allocation,
        }
    }
}

impl fmt::Display for MaskReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "method: {}  s: {}  seed: {}", self.method, self.s, self.seed)?;
        writeln!(f, "{:<32} {:>12} {:>9} {:>9} {:>9}", "group", "shape", "kept", "total", "sparsity")?;
        for (i, g) in self.groups.iter().enumerate() {
            let shape = g.shape.iter().map(ToString::to_string).collect::<Vec<_>>().join("x");
            write!(f, "{:<32} {:>12} {:>9} {:>9} {:>9.4}", g.name, shape, g.kept, g.total, g.sparsity)?;
            if let Some(a) = &self.er_allocation {
                write!(f, "  (er target {:.4})", a[i])?;
            }
            writeln!(f)?;
        }
        write!(f, "kept {} of {}  global sparsity {:.6}", self.kept, self.total, self.global_sparsity)
    }
}

/// Scores, thresholds and writes `mask.sadm` under `out`.
pub fn cmd_prune(cfg: &ExperimentConfig, out: &Path) -> Result<MaskReport> {
    if cfg.prune.is_none() {
        bail!("config has no `prune` section");
    }
    let (train_data, _) = cfg.load_data()?;
    let model = build_model(cfg)?;
    let mask = compute_mask(cfg, &model, &train_data)?.expect("prune section present");
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(MASK_FILE);
    write_mask(&mask, BufWriter::new(File::create(&path)?))?;
    Ok(MaskReport::new(&mask, Some(&model)))
}

pub fn load_mask(path: &Path) -> Result<PruneMask> {
    let f = File::open(path).with_context(|| format!("opening mask {}", path.display()))?;
    read_mask(BufReader::new(f)).with_context(|| format!("reading mask {}", path.display()))
}

pub fn cmd_inspect_mask(path: &Path) -> Result<MaskReport> {
    Ok(MaskReport::new(&load_mask(path)?, None))
}

/// In-memory training run: the model after training and its metrics.
pub struct Trained {
    pub model: Model,
    pub mask: Option<PruneMask>,
    pub metrics: RunMetrics,
    pub params: ParamReport,
}

/// Builds, prunes (from `mask` or the config) and trains.
pub fn run_experiment(cfg: &ExperimentConfig, mask: Option<PruneMask>) -> Result<Trained> {
    cfg.validate()?;
    let (train_data, eval_data) = cfg.load_data()?;
    let mut model = build_model(cfg)?;
    let mask = match mask {
        Some(m) => Some(m),
        None => compute_mask(cfg, &model, &train_data)?,
    };
    if let Some(m) = &mask {
        apply_mask(&mut model, m)?;
    }
    let params = trainable_param_report(&model);
    let metrics = train(&mut model, &train_data, &eval_data, &cfg.optimizer)?;
    Ok(Trained { model, mask, metrics, params })
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    #[serde(flatten)]
    pub summary: RunSummary,
    pub params: ParamReport,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let acc = self.summary.final_eval_accuracy.map_or("n/a".into(), |a| format!("{a:.4}"));
        write!(
            f,
            "steps {}  final eval accuracy {}  kept fraction {:.6}  artifacts in {}",
            self.summary.steps,
            acc,
            self.summary.kept_fraction,
            self.out_dir.display()
        )
    }
}

/// Trains and writes config, metrics, summary, checkpoint and mask under
/// `out`. A bad mask file fails before anything is written.
pub fn cmd_train(cfg: &ExperimentConfig, mask_path: Option<&Path>, out: &Path) -> Result<TrainReport> {
    let mask = mask_path.map(load_mask).transpose()?;
    let trained = run_experiment(cfg, mask)?;
    write_artifacts(cfg, &trained, out)?;
    Ok(TrainReport { summary: trained.metrics.summary(), params: trained.params, out_dir: out.to_path_buf() })
}

pub fn write_artifacts(cfg: &ExperimentConfig, t: &Trained, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_json() + "\n")?;
    let mut w = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    t.metrics.write_csv(&mut w)?;
    w.flush()?;
    let report = TrainReport { summary: t.metrics.summary(), params: t.params.clone(), out_dir: out.to_path_buf() };
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut w = BufWriter::new(File::create(out.join(CHECKPOINT_FILE))?);
    write_checkpoint(&t.model, &mut w)?;
    w.flush()?;
    if let Some(m) = &t.mask {
        write_mask(m, BufWriter::new(File::create(out.join(MASK_FILE))?))?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub n_examples: usize,
}

/// Evaluates the checkpoint saved under `out` on the eval split.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    let (_, eval_data) = cfg.load_data()?;
    let mut model = build_model(cfg)?;
    let path = out.join(CHECKPOINT_FILE);
    let f = File::open(&path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    let entries = read_checkpoint(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    model.load_checkpoint(&entries)?;
    let (loss, accuracy) = evaluate(&model, &eval_data)?;
    Ok(EvalReport { loss, accuracy, n_examples: eval_data.len() })
}
