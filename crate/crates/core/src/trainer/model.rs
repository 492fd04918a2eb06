use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Block, BlockConfig, BlockState, Embedding, LayerKind, QuerySource, RmsNorm};
use crate::params::{Binder, HasParams, Param};
use crate::resona::{self, ChunkCache, ResonaConfig};
use crate::tensor::{Prng, Scalar, Seq, Var};

/// Layer stack description. Layer `l` carries retrieval iff `l` is listed
/// in `resona_layers`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub kind: LayerKind,
    pub state_width: usize,
    pub mlp_expansion: usize,
    #[serde(default)]
    pub resona_layers: Vec<usize>,
    pub resona: ResonaConfig,
    /// Embedding init scale; `1/sqrt(D)` when absent.
    #[serde(default)]
    pub embed_std: Option<f64>,
}

impl ModelSpec {
    /// Four gated-recurrence layers of width `d_model`, no retrieval.
    pub fn desk(vocab: usize, d_model: usize) -> Self {
        Self {
            vocab,
            d_model,
            n_layers: 4,
            kind: LayerKind::GatedRecurrence,
            state_width: d_model,
            mlp_expansion: 2,
            resona_layers: Vec::new(),
            resona: ResonaConfig::desk(d_model, 2, 1),
            embed_std: None,
        }
    }

    pub fn with_resona(mut self, layers: &[usize]) -> Self {
        self.resona_layers = layers.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.n_layers == 0 {
            return Err(Error::Config("vocabulary, width and depth must be positive".into()));
        }
        let mut seen = vec![false; self.n_layers];
        for &l in &self.resona_layers {
            if l >= self.n_layers {
                return Err(Error::Config(format!("resona layer {l} out of range for {} layers", self.n_layers)));
            }
            if std::mem::replace(&mut seen[l], true) {
                return Err(Error::Config(format!("resona layer {l} listed twice")));
            }
        }
        if !self.resona_layers.is_empty() {
            self.resona.validate()?;
        }
        for b in self.blocks() {
            b.validate()?;
        }
        Ok(())
    }

    pub fn blocks(&self) -> Vec<BlockConfig> {
        (0..self.n_layers)
            .map(|l| BlockConfig {
                kind: self.kind,
                d_model: self.d_model,
                state_width: self.state_width,
                mlp_expansion: self.mlp_expansion,
                resona: self.resona_layers.contains(&l).then(|| self.resona.clone()),
                // the first layer has no recurrent history to query with
                query_source: if l == 0 { QuerySource::Embeddings } else { QuerySource::Hidden },
            })
            .collect()
    }

    /// Closed-form parameter count of the retrieval sites alone.
    pub fn resona_param_count(&self) -> usize {
        self.blocks()
            .iter()
            .filter_map(|b| b.resona.as_ref().map(|r| resona::param_count(r, b.d_model, b.query_width())))
            .sum()
    }
}

/// Embedding, blocks, final norm and tied output head.
#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub spec: ModelSpec,
    pub embed: Embedding<S>,
    pub blocks: Vec<Block<S>>,
    pub final_norm: RmsNorm<S>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub resona: usize,
    pub baseline: usize,
}

pub struct ModelOutput<S: Scalar> {
    pub logits: Var<S>,
    /// Retrieval masks built during this forward pass (one per augmented
    /// layer).
    pub mask_computations: usize,
    /// Final recurrent state of each block, per sequence.
    pub finals: Vec<Vec<S>>,
    pub x0: Var<S>,
}

/// Decoding state for one sequence.
#[derive(Clone, Debug)]
pub struct Session<S: Scalar> {
    pub states: Vec<BlockState<S>>,
    pub pos: usize,
}

impl<S: Scalar> Session<S> {
    /// Bytes of recurrent state plus retrieval caches.
    pub fn bytes(&self) -> usize {
        self.states
            .iter()
            .map(|s| s.recurrent.len() * std::mem::size_of::<S>() + s.cache.as_ref().map_or(0, |c| c.bytes()))
            .sum()
    }
}

/// Builds the model; parameter values depend only on `seed` and their
/// names, so a baseline and an augmented model share every common weight.
pub fn assemble<S: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<S>> {
    spec.validate()?;
    let rng = Prng::new(seed).derive("init");
    let blocks = spec
        .blocks()
        .into_iter()
        .enumerate()
        .map(|(l, cfg)| Block::init(&format!("layers.{l}"), cfg, &rng))
        .collect::<Result<Vec<_>>>()?;
    let model = Model {
        spec: spec.clone(),
        embed: Embedding::init("embed", spec.vocab, spec.d_model, spec.embed_std.unwrap_or(1.0 / (spec.d_model as f64).sqrt()), &rng)?,
        blocks,
        final_norm: RmsNorm::init("final_norm", spec.d_model)?,
    };
    let r = model.param_report();
    log::info!(
        "assembled {} layers: {} parameters ({} baseline + {} retrieval)",
        spec.n_layers,
        r.total,
        r.baseline,
        r.resona
    );
    Ok(model)
}

impl<S: Scalar> Model<S> {
    pub fn param_report(&self) -> ParamReport {
        let total = self.param_count();
        let mut res = 0;
        self.visit(&mut |p| {
            if p.group == crate::params::ParamGroup::Resona {
                res += p.numel();
            }
        });
        ParamReport {
            total,
            resona: res,
            baseline: total - res,
        }
    }

    /// Logits `[batch·T, |V|]` for flattened token ids.
    pub fn forward(&self, b: &Binder<S>, ids: &[usize], seq: Seq) -> Result<ModelOutput<S>> {
        if ids.len() != seq.rows() {
            return Err(Error::Invariant(format!("{} ids for {} rows", ids.len(), seq.rows())));
        }
        let x0 = self.embed.embed(b, ids)?;
        let mut x = x0.clone();
        let mut masks = 0;
        let mut finals = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(b, &x, &x0, seq, None)?;
            masks += out.masks.is_some() as usize;
            finals.push(out.finals);
            x = out.y;
        }
        let logits = self.embed.unembed(b, &self.final_norm.forward(b, &x)?)?;
        Ok(ModelOutput {
            logits,
            mask_computations: masks,
            finals,
            x0,
        })
    }

    pub fn start(&self) -> Session<S> {
        Session {
            states: self.blocks.iter().map(|b| b.new_state()).collect(),
            pos: 0,
        }
    }

    /// Feeds one token; returns the next-token logits.
    pub fn step(&self, session: &mut Session<S>, token: usize) -> Result<Vec<S>> {
        if token >= self.spec.vocab {
            return Err(Error::Index {
                what: "token id",
                index: token,
                bound: self.spec.vocab,
            });
        }
        let d = self.spec.d_model;
        let x0 = self.embed.table.value.data()[token * d..(token + 1) * d].to_vec();
        let mut x = x0.clone();
        for (block, state) in self.blocks.iter().zip(&mut session.states) {
            x = block.step(&x, &x0, state)?.0;
        }
        session.pos += 1;
        Ok(self.embed.unembed_row(&self.final_norm.row(&x)))
    }

    /// Processes a prompt in one batched pass and returns the logits of
    /// its last position and a session positioned after it.
    pub fn prefill(&self, prompt: &[usize]) -> Result<(Vec<S>, Session<S>)> {
        let tape = crate::tensor::Tape::inference();
        let b = Binder::new(&tape);
        let seq = Seq::single(prompt.len());
        let out = self.forward(&b, prompt, seq)?;
        let mut session = self.start();
        for ((block, state), fin) in self.blocks.iter().zip(&mut session.states).zip(out.finals) {
            state.recurrent = fin;
            if let Some(r) = &block.resona {
                state.cache = Some(ChunkCache::prefill(r, out.x0.data())?);
            }
        }
        session.pos = prompt.len();
        let v = self.spec.vocab;
        let last = out.logits.data()[(prompt.len() - 1) * v..].to_vec();
        Ok((last, session))
    }

    /// Greedy continuation of `prompt` by `n` tokens.
    pub fn generate(&self, prompt: &[usize], n: usize) -> Result<Vec<usize>> {
        let (mut logits, mut session) = self.prefill(prompt)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let next = argmax(&logits);
            out.push(next);
            logits = self.step(&mut session, next)?;
        }
        Ok(out)
    }

    pub fn find_param(&self, name: &str) -> Option<&Param<S>> {
        let mut found = None;
        self.visit(&mut |p| {
            if p.name == name {
                found = Some(p);
            }
        });
        found
    }
}

pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl<S: Scalar> HasParams<S> for Model<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        self.embed.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
        self.final_norm.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.embed.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.final_norm.visit_mut(f);
    }
}
