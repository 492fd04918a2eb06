//! Synthetic recall benchmarks: multi-query associative recall and the
//! recall-style tasks of the mechanistic design suite.

mod dataset;
mod oracle;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use dataset::{checksum, load_dataset, save_dataset, Dataset, Header, Split};
pub use oracle::{check_alphabets, check_example, Grammar};

use crate::error::{Error, Result};
use crate::tensor::Prng;

/// One training/evaluation sequence. `targets[j]` is scored at positions
/// with `loss_mask[j] = 1`, where it is the token the model must emit after
/// reading `tokens[..=j]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<u8>,
}

impl Example {
    fn padded(len: usize, pad: usize) -> Self {
        Self {
            tokens: vec![pad; len],
            targets: vec![pad; len],
            loss_mask: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn scored(&self) -> impl Iterator<Item = usize> + '_ {
        self.loss_mask.iter().enumerate().filter(|(_, m)| **m == 1).map(|(i, _)| i)
    }
}

/// Partition of the vocabulary into reserved tokens and disjoint alphabets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    pub vocab: usize,
    pub pad: usize,
    pub placeholder: usize,
    pub delimiter: usize,
    pub noise: Range<usize>,
    pub keys: Range<usize>,
    pub values: Range<usize>,
}

impl Alphabet {
    /// Ids 0..3 are pad, placeholder and delimiter; then `noise` noise
    /// tokens; the rest is split evenly into keys then values.
    pub fn new(vocab: usize, noise: usize) -> Result<Self> {
        let rest = vocab.saturating_sub(3 + noise);
        if rest < 2 {
            return Err(Error::Capacity(format!(
                "vocabulary of {vocab} leaves no room for keys and values after {noise} noise tokens"
            )));
        }
        let half = rest / 2;
        let k0 = 3 + noise;
        Ok(Self {
            vocab,
            pad: 0,
            placeholder: 1,
            delimiter: 2,
            noise: 3..k0,
            keys: k0..k0 + half,
            values: k0 + half..k0 + 2 * half,
        })
    }
}

fn pick(range: &Range<usize>, rng: &mut Prng) -> usize {
    range.start + rng.below(range.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MqarConfig {
    pub vocab: usize,
    pub pairs: usize,
    pub len: usize,
    /// Number of queries; defaults to one per pair.
    #[serde(default)]
    pub queries: Option<usize>,
    /// Allow the same key to be queried more than once.
    #[serde(default)]
    pub repeat_queries: bool,
}

impl MqarConfig {
    pub fn new(vocab: usize, pairs: usize, len: usize) -> Self {
        Self {
            vocab,
            pairs,
            len,
            queries: None,
            repeat_queries: false,
        }
    }

    pub fn query_count(&self) -> usize {
        self.queries.unwrap_or(self.pairs)
    }

    pub fn alphabet(&self) -> Result<Alphabet> {
        Alphabet::new(self.vocab, 0)
    }

    pub fn validate(&self) -> Result<Alphabet> {
        let a = self.alphabet()?;
        let q = self.query_count();
        if self.pairs == 0 || q == 0 {
            return Err(Error::Capacity("at least one pair and one query are required".into()));
        }
        if 2 * self.pairs + 2 * q > self.len {
            return Err(Error::Capacity(format!(
                "{} pairs and {q} queries need {} tokens, sequence length is {}",
                self.pairs,
                2 * self.pairs + 2 * q,
                self.len
            )));
        }
        if self.pairs > a.keys.len() {
            return Err(Error::Capacity(format!("{} distinct keys requested, alphabet has {}", self.pairs, a.keys.len())));
        }
        if !self.repeat_queries && q > self.pairs {
            return Err(Error::Capacity(format!("{q} distinct queries requested from {} keys", self.pairs)));
        }
        Ok(a)
    }
}

/// `count` examples; example `i` uses a stream derived from `(seed, i)`.
pub fn gen_mqar(cfg: &MqarConfig, seed: u64, count: usize) -> Result<Vec<Example>> {
    let a = cfg.validate()?;
    let root = Prng::new(seed).derive("mqar");
    Ok(par_map(count, |i| mqar_example(cfg, &a, &mut root.derive_index(i as u64))))
}

fn mqar_example(cfg: &MqarConfig, a: &Alphabet, rng: &mut Prng) -> Example {
    let mut ex = Example::padded(cfg.len, a.pad);
    let keys: Vec<usize> = rng.sample_distinct(a.keys.len(), cfg.pairs).into_iter().map(|k| a.keys.start + k).collect();
    let values: Vec<usize> = (0..cfg.pairs).map(|_| pick(&a.values, rng)).collect();
    for (p, (k, v)) in keys.iter().zip(&values).enumerate() {
        ex.tokens[2 * p] = *k;
        ex.tokens[2 * p + 1] = *v;
    }
    let q = cfg.query_count();
    let order: Vec<usize> = if cfg.repeat_queries {
        (0..q).map(|_| rng.below(cfg.pairs)).collect()
    } else {
        rng.sample_distinct(cfg.pairs, q)
    };
    let base = 2 * cfg.pairs;
    for (s, &p) in order.iter().enumerate() {
        let j = base + 2 * s;
        ex.tokens[j] = keys[p];
        ex.tokens[j + 1] = a.placeholder;
        ex.targets[j] = values[p];
        ex.loss_mask[j] = 1;
    }
    ex
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MadTask {
    Icr,
    NoisyIcr,
    FuzzyIcr,
    SelectiveCopy,
}

impl std::str::FromStr for MadTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "icr" => Ok(MadTask::Icr),
            "noisy_icr" | "noisy-icr" => Ok(MadTask::NoisyIcr),
            "fuzzy_icr" | "fuzzy-icr" => Ok(MadTask::FuzzyIcr),
            "selective_copy" | "selective-copy" | "sc" => Ok(MadTask::SelectiveCopy),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MadConfig {
    pub task: MadTask,
    pub vocab: usize,
    pub len: usize,
    /// Key/value pairs for the recall tasks.
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    /// Size of the reserved noise alphabet.
    #[serde(default = "default_noise_alphabet")]
    pub noise_alphabet: usize,
    /// Noise tokens inserted per example (noisy recall and selective copy).
    #[serde(default)]
    pub noise_budget: usize,
    /// Tokens per key for fuzzy recall.
    #[serde(default = "default_fuzzy_width")]
    pub fuzzy_width: usize,
    /// Tokens to reproduce for selective copy.
    #[serde(default = "default_content")]
    pub content_len: usize,
}

fn default_pairs() -> usize {
    16
}
fn default_noise_alphabet() -> usize {
    16
}
fn default_fuzzy_width() -> usize {
    2
}
fn default_content() -> usize {
    8
}

impl MadConfig {
    pub fn new(task: MadTask, vocab: usize, len: usize) -> Self {
        Self {
            task,
            vocab,
            len,
            pairs: default_pairs(),
            noise_alphabet: default_noise_alphabet(),
            noise_budget: 0,
            fuzzy_width: default_fuzzy_width(),
            content_len: default_content(),
        }
    }

    fn key_width(&self) -> usize {
        match self.task {
            MadTask::FuzzyIcr => self.fuzzy_width,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<Alphabet> {
        let a = Alphabet::new(self.vocab, self.noise_alphabet)?;
        let cap = |need: usize| -> Result<()> {
            if need > self.len {
                Err(Error::Capacity(format!("task needs {need} tokens, sequence length is {}", self.len)))
            } else {
                Ok(())
            }
        };
        if self.noise_budget > 0 && a.noise.is_empty() {
            return Err(Error::Capacity("noise requested without a noise alphabet".into()));
        }
        match self.task {
            MadTask::SelectiveCopy => {
                if self.content_len == 0 {
                    return Err(Error::Capacity("selective copy needs content".into()));
                }
                cap(2 * self.content_len + self.noise_budget)?;
            }
            _ => {
                let w = self.key_width();
                if w == 0 || self.pairs == 0 {
                    return Err(Error::Capacity("recall tasks need at least one pair of width ≥ 1".into()));
                }
                if self.task == MadTask::NoisyIcr && self.noise_budget % 2 == 1 {
                    return Err(Error::Config("noise is inserted in whole token pairs; use an even budget".into()));
                }
                if w == 1 && self.pairs > a.keys.len() {
                    return Err(Error::Capacity(format!("{} distinct keys requested, alphabet has {}", self.pairs, a.keys.len())));
                }
                let noise = if self.task == MadTask::NoisyIcr { self.noise_budget } else { 0 };
                cap(self.pairs * (w + 1) + noise + w + 1)?;
            }
        }
        Ok(a)
    }
}

/// Recall-task generators. `icr` lays out pairs then a single query of one
/// stored key; `noisy_icr` additionally interleaves noise-token pairs
/// between stored pairs; `fuzzy_icr` uses multi-token keys.
pub fn gen_mad(cfg: &MadConfig, seed: u64, count: usize) -> Result<Vec<Example>> {
    let a = cfg.validate()?;
    // Noisy and fuzzy recall share the plain recall stream so that their
    // degenerate settings reproduce it exactly.
    let stream = match cfg.task {
        MadTask::SelectiveCopy => "selective_copy",
        _ => "icr",
    };
    let root = Prng::new(seed).derive(stream);
    Ok(par_map(count, |i| {
        let mut rng = root.derive_index(i as u64);
        match cfg.task {
            MadTask::SelectiveCopy => copy_example(cfg, &a, &mut rng),
            _ => recall_example(cfg, &a, &mut rng),
        }
    }))
}

pub fn gen_icr(cfg: &MadConfig, seed: u64, count: usize) -> Result<Vec<Example>> {
    gen_mad(&MadConfig { task: MadTask::Icr, ..cfg.clone() }, seed, count)
}

pub fn gen_noisy_icr(cfg: &MadConfig, seed: u64, count: usize) -> Result<Vec<Example>> {
    gen_mad(&MadConfig { task: MadTask::NoisyIcr, ..cfg.clone() }, seed, count)
}

pub fn gen_fuzzy_icr(cfg: &MadConfig, seed: u64, count: usize) -> Result<Vec<Example>> {
    gen_mad(&MadConfig { task: MadTask::FuzzyIcr, ..cfg.clone() }, seed, count)
}

pub fn gen_selective_copy(cfg: &MadConfig, seed: u64, count: usize) -> Result<Vec<Example>> {
    gen_mad(&MadConfig { task: MadTask::SelectiveCopy, ..cfg.clone() }, seed, count)
}

fn recall_example(cfg: &MadConfig, a: &Alphabet, rng: &mut Prng) -> Example {
    let w = cfg.key_width();
    let mut ex = Example::padded(cfg.len, a.pad);
    // distinct keys: distinct ids for width 1, distinct tuples otherwise
    let keys: Vec<Vec<usize>> = if w == 1 {
        rng.sample_distinct(a.keys.len(), cfg.pairs).into_iter().map(|k| vec![a.keys.start + k]).collect()
    } else {
        let mut out: Vec<Vec<usize>> = Vec::with_capacity(cfg.pairs);
        while out.len() < cfg.pairs {
            let k: Vec<usize> = (0..w).map(|_| pick(&a.keys, rng)).collect();
            if !out.contains(&k) {
                out.push(k);
            }
        }
        out
    };
    let values: Vec<usize> = (0..cfg.pairs).map(|_| pick(&a.values, rng)).collect();
    let query = rng.below(cfg.pairs);
    let noise_pairs = if cfg.task == MadTask::NoisyIcr { cfg.noise_budget / 2 } else { 0 };
    // gaps[g] noise pairs precede stored pair g
    let mut gaps = vec![0usize; cfg.pairs];
    for _ in 0..noise_pairs {
        gaps[rng.below(cfg.pairs)] += 1;
    }
    let mut pos = 0;
    for p in 0..cfg.pairs {
        for _ in 0..2 * gaps[p] {
            ex.tokens[pos] = pick(&a.noise, rng);
            pos += 1;
        }
        for &k in &keys[p] {
            ex.tokens[pos] = k;
            pos += 1;
        }
        ex.tokens[pos] = values[p];
        pos += 1;
    }
    for &k in &keys[query] {
        ex.tokens[pos] = k;
        pos += 1;
    }
    ex.targets[pos - 1] = values[query];
    ex.loss_mask[pos - 1] = 1;
    ex.tokens[pos] = a.placeholder;
    ex
}

fn copy_example(cfg: &MadConfig, a: &Alphabet, rng: &mut Prng) -> Example {
    let n = cfg.content_len;
    let region = n + cfg.noise_budget;
    let mut ex = Example::padded(cfg.len, a.pad);
    let content: Vec<usize> = (0..n).map(|_| pick(&a.values, rng)).collect();
    let mut slots = rng.sample_distinct(region, n);
    slots.sort_unstable();
    let mut next = 0;
    for i in 0..region {
        if next < n && slots[next] == i {
            ex.tokens[i] = content[next];
            next += 1;
        } else {
            ex.tokens[i] = pick(&a.noise, rng);
        }
    }
    ex.tokens[region] = a.delimiter;
    for (i, &c) in content.iter().enumerate() {
        let j = region + i;
        ex.targets[j] = c;
        ex.loss_mask[j] = 1;
        if i + 1 < n {
            ex.tokens[j + 1] = c;
        }
    }
    ex
}

#[cfg(feature = "parallel")]
fn par_map<T: Send>(count: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..count).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T>(count: usize, f: impl Fn(usize) -> T) -> Vec<T> {
    (0..count).map(f).collect()
}

#[cfg(test)]
mod tests;
