//! Run configuration: a TOML file mirroring the model, training and task
//! settings, with command-line overrides applied on top.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use resona::resona::AlphaMode;
use resona::tasks::{MadConfig, MadTask, MqarConfig};
use resona::tensor::DType;
use resona::trainer::{ModelSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    /// `mqar`, `icr`, `noisy_icr`, `fuzzy_icr` or `selective_copy`.
    pub name: String,
    pub vocab: usize,
    pub len: usize,
    pub pairs: usize,
    #[serde(default)]
    pub queries: Option<usize>,
    #[serde(default)]
    pub repeat_queries: bool,
    #[serde(default = "default_noise_alphabet")]
    pub noise_alphabet: usize,
    #[serde(default)]
    pub noise_budget: usize,
    #[serde(default = "default_fuzzy_width")]
    pub fuzzy_width: usize,
    #[serde(default = "default_content")]
    pub content_len: usize,
    #[serde(default = "default_train_count")]
    pub train_count: usize,
    #[serde(default = "default_eval_count")]
    pub eval_count: usize,
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
fn default_train_count() -> usize {
    20_000
}
fn default_eval_count() -> usize {
    1_000
}

pub enum Task {
    Mqar(MqarConfig),
    Mad(MadConfig),
}

impl TaskSection {
    pub fn mqar(vocab: usize, len: usize, pairs: usize) -> Self {
        Self {
            name: "mqar".into(),
            vocab,
            len,
            pairs,
            queries: None,
            repeat_queries: false,
            noise_alphabet: default_noise_alphabet(),
            noise_budget: 0,
            fuzzy_width: default_fuzzy_width(),
            content_len: default_content(),
            train_count: default_train_count(),
            eval_count: default_eval_count(),
        }
    }

    pub fn task(&self) -> anyhow::Result<Task> {
        if self.name == "mqar" {
            return Ok(Task::Mqar(MqarConfig {
                vocab: self.vocab,
                pairs: self.pairs,
                len: self.len,
                queries: self.queries,
                repeat_queries: self.repeat_queries,
            }));
        }
        let task: MadTask = self.name.parse()?;
        Ok(Task::Mad(MadConfig {
            task,
            vocab: self.vocab,
            len: self.len,
            pairs: self.pairs,
            noise_alphabet: self.noise_alphabet,
            noise_budget: self.noise_budget,
            fuzzy_width: self.fuzzy_width,
            content_len: self.content_len,
        }))
    }

    /// The generator config as JSON, used for dataset headers and report
    /// joins.
    pub fn config_json(&self) -> anyhow::Result<serde_json::Value> {
        Ok(match self.task()? {
            Task::Mqar(c) => serde_json::to_value(c)?,
            Task::Mad(c) => serde_json::to_value(c)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub task: TaskSection,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelSpec::desk(256, 64);
        model.resona.chunk_size = 2;
        model.resona.top_k = 1;
        Self {
            seed: 1,
            out: PathBuf::from("runs/default"),
            task: TaskSection::mqar(256, 128, 16),
            model,
            train: TrainConfig {
                batch_size: 64,
                precision: DType::F32,
                ..TrainConfig::default()
            },
        }
    }
}

/// Command-line overrides shared by every verb.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub precision: Option<DType>,
    pub resona_layers: Option<Vec<usize>>,
    pub chunk_size: Option<usize>,
    pub top_k: Option<usize>,
    pub alpha: Option<f64>,
    pub alpha_mode: Option<AlphaMode>,
    pub resona_lr_mult: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| anyhow::anyhow!(ConfigError(format!("invalid config {}: {e}", path.display()))))
    }

    pub fn resolve(path: Option<&Path>, o: &Overrides) -> anyhow::Result<Self> {
        let mut c = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = o.seed {
            c.seed = s;
            c.train.seed = s;
        }
        if let Some(p) = &o.out {
            c.out = p.clone();
        }
        if let Some(p) = o.precision {
            c.train.precision = p;
        }
        if let Some(l) = &o.resona_layers {
            c.model.resona_layers = l.clone();
        }
        if let Some(u) = o.chunk_size {
            c.model.resona.chunk_size = u;
        }
        if let Some(k) = o.top_k {
            c.model.resona.top_k = k;
        }
        if let Some(a) = o.alpha {
            c.model.resona.alpha = a;
        }
        if let Some(m) = o.alpha_mode {
            c.model.resona.alpha_mode = m;
        }
        if let Some(m) = o.resona_lr_mult {
            c.train.resona_lr_mult = m;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let wrap = |e: resona::Error| anyhow::anyhow!(ConfigError(e.to_string()));
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if self.model.vocab != self.task.vocab {
            bail!(ConfigError(format!(
                "model vocabulary {} differs from task vocabulary {}",
                self.model.vocab, self.task.vocab
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// `baseline`, or `resona@<layers>` for augmented models.
    pub fn variant(&self) -> String {
        if self.model.resona_layers.is_empty() {
            "baseline".into()
        } else {
            let l: Vec<String> = self.model.resona_layers.iter().map(|l| l.to_string()).collect();
            format!("resona@{}", l.join("+"))
        }
    }
}

/// Marks an error as a validation failure (exit code 1).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::default().to_toml().unwrap();
        text.push_str("\n[extra]\nx = 1\n");
        assert!(toml::from_str::<RunConfig>(&text).is_err());
        let text = RunConfig::default().to_toml().unwrap().replace("[train]\n", "[train]\nbogus = 3\n");
        assert!(toml::from_str::<RunConfig>(&text).is_err());
    }

    #[test]
    fn overrides_apply() {
        let o = Overrides {
            seed: Some(9),
            resona_layers: Some(vec![0]),
            alpha: Some(1.0),
            ..Overrides::default()
        };
        let c = RunConfig::resolve(None, &o).unwrap();
        assert_eq!((c.seed, c.train.seed, c.model.resona.alpha), (9, 9, 1.0));
        assert_eq!(c.variant(), "resona@0");
    }
}
