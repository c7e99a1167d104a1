//! Grid sweeps over sparsity, pruning method, or Large-Sparse scale.
//!
//! Every point runs `n_seeds` seeds (`cfg.seed + i`). Runs execute on a
//! bounded rayon pool; the aggregate CSV is written once at the end. If any
//! run fails, the rows of the points that completed are still written,
//! followed by a `# ABORTED` line, and the error is returned.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, ensure, Context, Result};
use rayon::prelude::*;
use sparse_adapter::adapters::large_sparse_config;
use sparse_adapter::pruning::{PruneConfig, PruneMethod};
use sparse_adapter::training::RunMetrics;

use crate::commands::run_experiment;
use crate::config::ExperimentConfig;

pub const DEFAULT_SEEDS: usize = 3;
pub const SWEEP_FILE: &str = "sweep.csv";

pub const SWEEP_HEADER: &str = "method,s,r,n_seeds,kept_fraction,dense_fraction,adapter_fraction,\
accuracy_mean,accuracy_std,steps_to_threshold_mean,steps_to_threshold_std,reached";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Sparsity,
    Method,
    LargeSparse,
}

impl FromStr for SweepAxis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparsity" => Ok(SweepAxis::Sparsity),
            "method" => Ok(SweepAxis::Method),
            "large-sparse" => Ok(SweepAxis::LargeSparse),
            _ => bail!("unknown sweep axis `{s}` (expected sparsity, method or large-sparse)"),
        }
    }
}

/// One grid point before seeds are expanded.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub method: PruneMethod,
    pub s: f64,
    pub r: usize,
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub n_seeds: usize,
    pub workers: usize,
    /// Absolute eval accuracy for the steps-to-threshold columns.
    pub threshold: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { n_seeds: DEFAULT_SEEDS, workers: 1, threshold: 0.8 }
    }
}

/// Parses `--values` for `axis` against the base config.
pub fn sweep_points(cfg: &ExperimentConfig, axis: SweepAxis, values: &str) -> Result<Vec<SweepPoint>> {
    let items: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    ensure!(!items.is_empty(), "--values is empty");
    let base_method = cfg.prune.as_ref().map_or(PruneMethod::Random, |p| p.method);
    let r = cfg.adapter.r;
    items
        .into_iter()
        .map(|v| match axis {
            SweepAxis::Sparsity => {
                let s: f64 = v.parse().with_context(|| format!("bad sparsity `{v}`"))?;
                ensure!((0.0..1.0).contains(&s), "sparsity {s} outside [0, 1)");
                Ok(SweepPoint { method: base_method, s, r })
            }
            SweepAxis::Method => {
                let method: PruneMethod = v.parse().map_err(|e| anyhow!("{e}"))?;
                let s = cfg.prune.as_ref().map(|p| p.s).context("method sweep needs a `prune` section for s")?;
                Ok(SweepPoint { method, s, r })
            }
            SweepAxis::LargeSparse => {
                let k: usize = v.parse().with_context(|| format!("bad scale `{v}`"))?;
                let ls = large_sparse_config(r, k)?;
                Ok(SweepPoint { method: base_method, s: ls.s, r: ls.r })
            }
        })
        .collect()
}

/// The base config specialized to a point and seed.
pub fn point_config(base: &ExperimentConfig, p: &SweepPoint, seed: u64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.adapter.r = p.r;
    let mut prune = cfg.prune.clone().unwrap_or_else(|| PruneConfig::new(p.method, p.s, seed));
    prune.method = p.method;
    prune.s = p.s;
    cfg.prune = Some(prune);
    cfg.with_seed(seed)
}

#[derive(Clone, Debug)]
struct RunResult {
    kept_fraction: f64,
    dense_fraction: f64,
    adapter_fraction: f64,
    accuracy: f64,
    metrics: RunMetrics,
}

/// Aggregate row for one point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub n_seeds: usize,
    pub kept_fraction: f64,
    /// Prunable adapter weights over total parameters, before masking.
    pub dense_fraction: f64,
    /// Kept adapter parameters, biases included, over total parameters.
    pub adapter_fraction: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub steps_mean: Option<f64>,
    pub steps_std: Option<f64>,
    /// Seeds that reached the threshold.
    pub reached: usize,
}

impl SweepRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.3}"));
        format!(
            "{},{},{},{},{:.8},{:.8},{:.8},{:.6},{:.6},{},{},{}",
            self.point.method,
            self.point.s,
            self.point.r,
            self.n_seeds,
            self.kept_fraction,
            self.dense_fraction,
            self.adapter_fraction,
            self.accuracy_mean,
            self.accuracy_std,
            opt(self.steps_mean),
            opt(self.steps_std),
            self.reached
        )
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(point: &SweepPoint, runs: &[RunResult], threshold: f64) -> SweepRow {
    let col = |f: fn(&RunResult) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    let (accuracy_mean, accuracy_std) = mean_std(&col(|r| r.accuracy));
    let steps: Vec<f64> =
        runs.iter().filter_map(|r| r.metrics.steps_to_threshold(threshold)).map(|s| s as f64).collect();
    let (steps_mean, steps_std) = if steps.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&steps);
        (Some(m), Some(s))
    };
    SweepRow {
        point: point.clone(),
        n_seeds: runs.len(),
        kept_fraction: mean_std(&col(|r| r.kept_fraction)).0,
        dense_fraction: mean_std(&col(|r| r.dense_fraction)).0,
        adapter_fraction: mean_std(&col(|r| r.adapter_fraction)).0,
        accuracy_mean,
        accuracy_std,
        steps_mean,
        steps_std,
        reached: steps.len(),
    }
}

fn run_point(base: &ExperimentConfig, p: &SweepPoint, seed: u64) -> Result<RunResult> {
    let cfg = point_config(base, p, seed);
    let t = run_experiment(&cfg, None)
        .with_context(|| format!("method={} s={} r={} seed={seed}", p.method, p.s, p.r))?;
    let total = t.params.total() as f64;
    Ok(RunResult {
        kept_fraction: t.params.weight_fraction_kept,
        dense_fraction: t.params.prunable_total as f64 / total,
        adapter_fraction: t.params.adapter_kept as f64 / total,
        accuracy: t.metrics.final_eval().map_or(f64::NAN, |r| r.accuracy),
        metrics: t.metrics,
    })
}

fn point_label(p: &SweepPoint, seed: u64) -> String {
    format!("{}_s{}_r{}_seed{seed}", p.method, p.s, p.r)
}

/// Runs the grid and writes `sweep.csv` plus each run's metrics under
/// `out/runs/`. Returns the aggregate rows.
pub fn cmd_sweep(base: &ExperimentConfig, points: &[SweepPoint], opts: &SweepOptions, out: &Path) -> Result<Vec<SweepRow>> {
    base.validate()?;
    ensure!(opts.n_seeds >= 1, "need at least one seed per point");
    ensure!(opts.workers >= 1, "--workers must be at least 1");
    for p in points {
        point_config(base, p, base.seed).validate().with_context(|| format!("sweep point {p:?}"))?;
    }
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|i| (0..opts.n_seeds as u64).map(move |k| (i, base.seed.wrapping_add(k))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.workers).build()?;
    let results: Vec<Result<RunResult>> =
        pool.install(|| jobs.par_iter().map(|&(i, seed)| run_point(base, &points[i], seed)).collect());

    fs::create_dir_all(out.join("runs")).with_context(|| format!("creating {}", out.display()))?;
    let mut rows = Vec::new();
    let mut failure = None;
    for (i, p) in points.iter().enumerate() {
        let mut runs = Vec::new();
        for (&(_, seed), res) in jobs.iter().zip(&results).filter(|((j, _), _)| *j == i) {
            match res {
                Ok(r) => {
                    let mut w = BufWriter::new(File::create(out.join("runs").join(point_label(p, seed) + ".csv"))?);
                    r.metrics.write_csv(&mut w)?;
                    w.flush()?;
                    runs.push(r.clone());
                }
                Err(e) if failure.is_none() => failure = Some(format!("{e:#}")),
                Err(_) => {}
            }
        }
        if runs.len() == opts.n_seeds {
            rows.push(aggregate(p, &runs, opts.threshold));
        }
    }

    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for row in &rows {
        writeln!(csv, "{}", row.to_csv()).expect("string write");
    }
    if let Some(msg) = &failure {
        writeln!(csv, "# ABORTED: {}", msg.replace('\n', " ")).expect("string write");
    }
    fs::write(out.join(SWEEP_FILE), csv)?;
    match failure {
        Some(msg) => bail!("sweep aborted: {msg}"),
        None => Ok(rows),
    }
}
