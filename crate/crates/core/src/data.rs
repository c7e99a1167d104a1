//! Classification examples, synthetic task generators and the line-delimited
//! JSON dataset format (`{"tokens": [..], "label": n}` per line).

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Dataset { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.examples.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    /// Consecutive chunks of `batch_size` (the last may be short).
    pub fn chunks(&self, batch_size: usize) -> impl Iterator<Item = &[Example]> {
        self.examples.chunks(batch_size.max(1))
    }

    /// Shuffled mini-batches for one epoch.
    pub fn shuffled_batches(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<Example>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order
            .chunks(batch_size.max(1))
            .map(|idx| idx.iter().map(|&i| self.examples[i].clone()).collect())
            .collect()
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Dataset> {
        let mut examples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: Example = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset { line: i + 1, reason: e.to_string() })?;
            if ex.tokens.is_empty() {
                return Err(Error::Dataset { line: i + 1, reason: "empty token list".into() });
            }
            examples.push(ex);
        }
        Ok(Dataset { examples })
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for ex in &self.examples {
            serde_json::to_writer(&mut w, ex)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Number of entries in a one-token-per-line vocabulary file.
pub fn read_vocab_size(reader: impl BufRead) -> Result<usize> {
    let mut n = 0;
    for line in reader.lines() {
        if !line?.trim().is_empty() {
            n += 1;
        }
    }
    Ok(n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// Each token belongs to class `token % n_classes`; the label is the
    /// class with the strict plurality of tokens.
    TokenMajority,
    /// Exactly one key token (ids `< 2·n_classes`) appears among filler
    /// tokens; the label is the class bound to that key.
    KeyedLookup,
    /// The label is the number of "marked" tokens (ids `< vocab/2`) in the
    /// first four positions, modulo `n_classes`.
    ParityWindow,
}

impl SyntheticTask {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticTask::TokenMajority => "token_majority",
            SyntheticTask::KeyedLookup => "keyed_lookup",
            SyntheticTask::ParityWindow => "parity_window",
        }
    }
}

const PARITY_WINDOW: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub task: SyntheticTask,
    pub vocab: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Probability of replacing a training label with a different class.
    /// Evaluation labels are always clean.
    #[serde(default)]
    pub noise_rate: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn token_majority(seed: u64) -> Self {
        SyntheticTaskSpec {
            task: SyntheticTask::TokenMajority,
            vocab: 64,
            seq_len: 8,
            n_classes: 4,
            n_train: 512,
            n_eval: 256,
            noise_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic task: {m}")));
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2");
        }
        if self.seq_len < 1 || self.n_train < 1 || self.n_eval < 1 {
            return bad("seq_len, n_train and n_eval must be >= 1");
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad("noise_rate must be in [0, 1)");
        }
        match self.task {
            SyntheticTask::TokenMajority if self.vocab < self.n_classes => {
                bad("token_majority needs vocab >= n_classes")
            }
            SyntheticTask::KeyedLookup if self.vocab <= 2 * self.n_classes || self.seq_len < 2 => {
                bad("keyed_lookup needs vocab > 2·n_classes and seq_len >= 2")
            }
            SyntheticTask::ParityWindow if self.vocab < 2 || self.seq_len < PARITY_WINDOW => {
                bad("parity_window needs vocab >= 2 and seq_len >= 4")
            }
            _ => Ok(()),
        }
    }

    /// Deterministic, disjoint train and eval splits.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let total = self.n_train + self.n_eval;
        let mut seen = HashSet::with_capacity(total);
        let mut examples = Vec::with_capacity(total);
        let mut attempts = 0usize;
        while examples.len() < total {
            attempts += 1;
            if attempts > 50 * total + 1000 {
                return Err(Error::InvalidConfig(format!(
                    "synthetic task: cannot draw {total} distinct sequences"
                )));
            }
            let Some(ex) = self.draw(&mut rng) else { continue };
            if seen.insert(ex.tokens.clone()) {
                examples.push(ex);
            }
        }
        let eval = examples.split_off(self.n_train);
        for ex in &mut examples {
            if self.noise_rate > 0.0 && rng.random_bool(self.noise_rate) {
                let shift = rng.random_range(1..self.n_classes);
                ex.label = (ex.label + shift) % self.n_classes;
            }
        }
        Ok((Dataset::new(examples), Dataset::new(eval)))
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Option<Example> {
        let (v, c, t) = (self.vocab, self.n_classes, self.seq_len);
        match self.task {
            SyntheticTask::TokenMajority => {
                let planted = rng.random_range(0..c);
                // Tokens of class `planted` are planted + k·c.
                let per_class = (v - planted).div_ceil(c);
                let tokens: Vec<usize> = (0..t)
                    .map(|_| {
                        if rng.random_bool(0.5) {
                            planted + c * rng.random_range(0..per_class)
                        } else {
                            rng.random_range(0..v)
                        }
                    })
                    .collect();
                let mut counts = vec![0usize; c];
                for &tok in &tokens {
                    counts[tok % c] += 1;
                }
                let best = *counts.iter().max().expect("n_classes >= 2");
                let mut winners = counts.iter().enumerate().filter(|(_, &n)| n == best);
                let (label, _) = winners.next().expect("max exists");
                if winners.next().is_some() {
                    return None;
                }
                Some(Example { tokens, label })
            }
            SyntheticTask::KeyedLookup => {
                let n_keys = 2 * c;
                let key = rng.random_range(0..n_keys);
                let pos = rng.random_range(0..t);
                let tokens = (0..t)
                    .map(|i| if i == pos { key } else { rng.random_range(n_keys..v) })
                    .collect();
                Some(Example { tokens, label: key % c })
            }
            SyntheticTask::ParityWindow => {
                let tokens: Vec<usize> = (0..t).map(|_| rng.random_range(0..v)).collect();
                let marked = tokens[..PARITY_WINDOW].iter().filter(|&&x| x < v / 2).count();
                Some(Example { tokens, label: marked % c })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        for task in [SyntheticTask::TokenMajority, SyntheticTask::KeyedLookup, SyntheticTask::ParityWindow] {
            let spec = SyntheticTaskSpec { task, ..SyntheticTaskSpec::token_majority(5) };
            let (a_train, a_eval) = spec.generate().unwrap();
            let (b_train, b_eval) = spec.generate().unwrap();
            assert_eq!(a_train, b_train);
            assert_eq!(a_eval, b_eval);
            assert_eq!((a_train.len(), a_eval.len()), (512, 256));
            let train: HashSet<_> = a_train.examples.iter().map(|e| &e.tokens).collect();
            assert!(a_eval.examples.iter().all(|e| !train.contains(&e.tokens)), "{task:?}");
        }
    }

    #[test]
    fn token_majority_labels_are_strict_pluralities() {
        let (train, _) = SyntheticTaskSpec::token_majority(1).generate().unwrap();
        for ex in &train.examples {
            let mut counts = [0; 4];
            for &t in &ex.tokens {
                counts[t % 4] += 1;
            }
            let best = counts[ex.label];
            assert!(counts.iter().enumerate().all(|(k, &n)| k == ex.label || n < best));
        }
    }

    #[test]
    fn label_noise_only_touches_training_split() {
        let clean = SyntheticTaskSpec::token_majority(3);
        let noisy = SyntheticTaskSpec { noise_rate: 0.3, ..clean.clone() };
        let (ct, ce) = clean.generate().unwrap();
        let (nt, ne) = noisy.generate().unwrap();
        assert_eq!(ce, ne);
        let flipped = ct.examples.iter().zip(&nt.examples).filter(|(a, b)| a.label != b.label).count();
        assert!(flipped > 100 && flipped < 220, "{flipped}");
    }

    #[test]
    fn jsonl_round_trip() {
        let (train, _) = SyntheticTaskSpec::token_majority(2).generate().unwrap();
        let mut buf = Vec::new();
        train.write_jsonl(&mut buf).unwrap();
        let back = Dataset::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, train);
        let err = Dataset::read_jsonl("{\"tokens\":[1],\"label\":0}\n{bad".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Dataset { line: 2, .. }));
    }
}
