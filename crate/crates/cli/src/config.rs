//! Experiment configuration files.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sparse_adapter::adapters::AdapterSpec;
use sparse_adapter::data::{read_vocab_size, Dataset, SyntheticTaskSpec};
use sparse_adapter::model::EncoderConfig;
use sparse_adapter::pruning::PruneConfig;
use sparse_adapter::training::OptimizerConfig;

/// Where examples come from: JSONL files or a synthetic generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_path: Option<PathBuf>,
    /// One token per line; bounds token ids when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticTaskSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    pub adapter: AdapterSpec,
    /// Absent for a dense-adapter baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub data: DataSpec,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Seeds the backbone and adapter initialization.
    #[serde(default)]
    pub seed: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let file = File::open(path).with_context(|| format!("opening config {}", path.display()))?;
        let cfg: ExperimentConfig = serde_json::from_reader(BufReader::new(file))
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets the run seed and the shuffle and pruning seeds with it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.optimizer.seed = seed;
        if let Some(p) = &mut self.prune {
            p.seed = seed;
        }
        self
    }

    pub fn backbone_seed(&self) -> u64 {
        self.seed
    }

    pub fn adapter_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.adapter.validate(self.encoder.d_model)?;
        if let Some(p) = &self.prune {
            p.validate()?;
        }
        self.optimizer.validate()?;
        ensure!(!self.output_dir.as_os_str().is_empty(), "output_dir must not be empty");
        let d = &self.data;
        match (&d.path, &d.synthetic) {
            (Some(_), Some(_)) => bail!("data: give either `path` or `synthetic`, not both"),
            (None, None) => bail!("data: one of `path` or `synthetic` is required"),
            (Some(_), None) => ensure!(d.eval_path.is_some(), "data: `eval_path` is required with `path`"),
            (None, Some(s)) => {
                s.validate()?;
                ensure!(
                    s.vocab <= self.encoder.vocab_size,
                    "data: synthetic vocab {} exceeds encoder.vocab_size {}",
                    s.vocab,
                    self.encoder.vocab_size
                );
                ensure!(
                    s.seq_len <= self.encoder.max_seq_len,
                    "data: synthetic seq_len {} exceeds encoder.max_seq_len {}",
                    s.seq_len,
                    self.encoder.max_seq_len
                );
                ensure!(
                    s.n_classes == self.encoder.n_classes,
                    "data: synthetic n_classes {} differs from encoder.n_classes {}",
                    s.n_classes,
                    self.encoder.n_classes
                );
            }
        }
        Ok(())
    }

    /// Train and eval splits, checked against the encoder.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, eval) = match (&self.data.path, &self.data.synthetic) {
            (_, Some(spec)) => spec.generate()?,
            (Some(path), None) => {
                let eval_path = self.data.eval_path.as_ref().expect("validated");
                (read_jsonl(path)?, read_jsonl(eval_path)?)
            }
            (None, None) => bail!("data: nothing to load"),
        };
        let vocab = match &self.data.vocab_path {
            Some(p) => {
                let f = File::open(p).with_context(|| format!("opening vocab {}", p.display()))?;
                let n = read_vocab_size(BufReader::new(f))?;
                ensure!(n <= self.encoder.vocab_size, "vocab file has {n} tokens, encoder.vocab_size is {}", self.encoder.vocab_size);
                n
            }
            None => self.encoder.vocab_size,
        };
        for (name, ds) in [("train", &train), ("eval", &eval)] {
            ensure!(!ds.is_empty(), "{name} split is empty");
            for (i, ex) in ds.examples.iter().enumerate() {
                ensure!(
                    ex.label < self.encoder.n_classes,
                    "{name} example {i}: label {} outside {} classes",
                    ex.label,
                    self.encoder.n_classes
                );
                if let Some(&t) = ex.tokens.iter().find(|&&t| t >= vocab) {
                    bail!("{name} example {i}: token {t} outside vocabulary of {vocab}");
                }
                ensure!(
                    !ex.tokens.is_empty() && ex.tokens.len() <= self.encoder.max_seq_len,
                    "{name} example {i}: length {} outside 1..={}",
                    ex.tokens.len(),
                    self.encoder.max_seq_len
                );
            }
        }
        Ok((train, eval))
    }
}

fn read_jsonl(path: &Path) -> Result<Dataset> {
    let f = File::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
    Dataset::read_jsonl(BufReader::new(f)).with_context(|| format!("reading dataset {}", path.display()))
}
