use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::model::{argmax, Model};
use super::optim::{clip_grad_norm, lr_at, AdamW};
use crate::error::{Error, Result};
use crate::params::{accumulate, Binder, HasParams};
use crate::tasks::Example;
use crate::tensor::{DType, Prng, Scalar, Seq, Tape};

/// Examples per gradient shard. Fixed so the reduction order does not
/// depend on the worker count.
pub const SHARD: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of steps spent in linear warmup.
    pub warmup: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub resona_lr_mult: f64,
    pub seed: u64,
    pub precision: DType,
    pub log_every: usize,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Cap on evaluation examples used during training.
    #[serde(default)]
    pub eval_limit: Option<usize>,
    /// Gradient workers; falls back to `RESONA_NUM_WORKERS`, then 1.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 64,
            lr: 1e-3,
            warmup: 0.05,
            weight_decay: 0.01,
            clip_norm: 1.0,
            resona_lr_mult: 1.0,
            seed: 1,
            precision: DType::F64,
            log_every: 50,
            eval_every: 0,
            eval_limit: None,
            workers: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return bad(format!("warmup fraction must lie in [0, 1), got {}", self.warmup));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip norm must be positive, got {}", self.clip_norm));
        }
        if !(self.lr >= 0.0 && self.resona_lr_mult >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rate, multiplier and weight decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn worker_count(&self) -> usize {
        self.workers
            .or_else(|| std::env::var("RESONA_NUM_WORKERS").ok().and_then(|v| v.parse().ok()))
            .unwrap_or(1)
            .max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub step: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub eval_slot_acc: Option<f64>,
    pub eval_exact: Option<f64>,
    pub wall_ms: f64,
    pub tokens_per_sec: f64,
}

impl Metrics {
    /// Equality on everything except timing.
    pub fn same_values(&self, other: &Metrics) -> bool {
        self.step == other.step
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
            && self.grad_norm.to_bits() == other.grad_norm.to_bits()
            && self.eval_slot_acc.map(f64::to_bits) == other.eval_slot_acc.map(f64::to_bits)
            && self.eval_exact.map(f64::to_bits) == other.eval_exact.map(f64::to_bits)
    }
}

pub fn same_stream(a: &[Metrics], b: &[Metrics]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_values(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub slot_acc: f64,
    pub exact: f64,
    pub slots: usize,
    pub examples: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub metrics: Vec<Metrics>,
    /// Loss of every step's batch.
    pub losses: Vec<f64>,
    pub best: Option<(usize, f64)>,
    pub final_eval: Option<EvalResult>,
}

type BestHook<'a, S> = dyn FnMut(&Model<S>, &AdamW<S>, usize) -> Result<()> + 'a;

/// Observation points of a run.
#[derive(Default)]
pub struct Hooks<'a, S: Scalar> {
    pub on_metrics: Option<Box<dyn FnMut(&Metrics) -> Result<()> + 'a>>,
    pub on_best: Option<Box<BestHook<'a, S>>>,
}

fn check_lengths(data: &[Example]) -> Result<usize> {
    let t = data.first().ok_or_else(|| Error::Config("dataset is empty".into()))?.len();
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    if let Some((i, e)) = data.iter().enumerate().find(|(_, e)| e.len() != t) {
        return Err(Error::Config(format!("example {i} has length {}, expected {t}", e.len())));
    }
    Ok(t)
}

fn flatten(batch: &[&Example]) -> (Vec<usize>, Vec<usize>, Vec<u8>) {
    let mut ids = Vec::new();
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for e in batch {
        ids.extend_from_slice(&e.tokens);
        targets.extend_from_slice(&e.targets);
        mask.extend_from_slice(&e.loss_mask);
    }
    (ids, targets, mask)
}

/// Weighted shard loss and its parameter gradients.
fn shard_gradients<S: Scalar>(
    model: &Model<S>,
    batch: &[&Example],
    t: usize,
    weight: f64,
) -> Result<(f64, HashMap<String, Vec<S>>)> {
    let (ids, targets, mask) = flatten(batch);
    let tape = Tape::new();
    let b = Binder::new(&tape);
    let out = model.forward(&b, &ids, Seq::new(batch.len(), t))?;
    let loss = tape.cross_entropy(&out.logits, &targets, &mask)?;
    let scaled = tape.scale(&loss, S::from_f64_lossy(weight));
    let value = scaled.data()[0].as_f64();
    let bound = b.into_bound();
    let grads = tape.backward(&scaled)?;
    Ok((value, bound.collect(&grads)))
}

fn batch_gradients<S: Scalar>(model: &Model<S>, batch: &[&Example], t: usize, workers: usize) -> Result<(f64, Vec<HashMap<String, Vec<S>>>)> {
    let total: usize = batch.iter().map(|e| e.scored().count()).sum();
    if total == 0 {
        return Err(Error::DegenerateBatch);
    }
    let shards: Vec<&[&Example]> = batch.chunks(SHARD).collect();
    let run = |s: &&[&Example]| {
        let count: usize = s.iter().map(|e| e.scored().count()).sum();
        if count == 0 {
            return Ok((0.0, HashMap::new()));
        }
        shard_gradients(model, s, t, count as f64 / total as f64)
    };
    let results: Vec<Result<(f64, HashMap<String, Vec<S>>)>> = parallel_map(&shards, workers, run);
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(results.len());
    for r in results {
        let (l, g) = r?;
        loss += l;
        grads.push(g);
    }
    Ok((loss, grads))
}

#[cfg(feature = "parallel")]
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, R>(items: &[T], _workers: usize, f: impl Fn(&T) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Runs steps `start..cfg.steps`. The batch at step `s` depends only on
/// `(cfg.seed, s)`, so resumed runs continue the same sequence.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    opt: &mut AdamW<S>,
    train_set: &[Example],
    eval_set: &[Example],
    cfg: &TrainConfig,
    start: usize,
    hooks: &mut Hooks<S>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t = check_lengths(train_set)?;
    opt.weight_decay = cfg.weight_decay;
    let workers = cfg.worker_count();
    let batch_rng = Prng::new(cfg.seed).derive("batches");
    let eval_view = &eval_set[..cfg.eval_limit.unwrap_or(eval_set.len()).min(eval_set.len())];
    let mut out = TrainOutcome::default();
    let mut since_log = Instant::now();
    let mut tokens = 0usize;
    for step in start..cfg.steps {
        let mut rng = batch_rng.derive_index(step as u64);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(train_set.len())).collect();
        let batch: Vec<&Example> = idx.iter().map(|&i| &train_set[i]).collect();

        model.zero_grads();
        let (loss, grads) = batch_gradients(model, &batch, t, workers).map_err(|e| annotate(e, step, &idx))?;
        if !loss.is_finite() {
            return Err(annotate(Error::NonFinite { op: "training loss".into() }, step, &idx));
        }
        for g in &grads {
            accumulate(model, g);
        }
        let norm = clip_grad_norm(model, cfg.clip_norm);
        let lr = lr_at(step, cfg.steps, cfg.lr, cfg.warmup);
        opt.step(model, lr, cfg.resona_lr_mult);
        out.losses.push(loss);
        tokens += cfg.batch_size * t;

        let last = step + 1 == cfg.steps;
        let do_eval = !eval_view.is_empty() && (last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0));
        let do_log = do_eval || (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) || step == start;
        if !do_log {
            continue;
        }
        let ev = if do_eval { Some(evaluate(model, eval_view, 64)?) } else { None };
        let ms = since_log.elapsed().as_secs_f64() * 1e3;
        let m = Metrics {
            step: step + 1,
            train_loss: loss,
            lr,
            grad_norm: norm,
            eval_slot_acc: ev.map(|e| e.slot_acc),
            eval_exact: ev.map(|e| e.exact),
            wall_ms: ms,
            tokens_per_sec: tokens as f64 / (ms / 1e3).max(1e-9),
        };
        log::info!(
            "step {} loss {:.5} lr {:.2e}{}",
            m.step,
            m.train_loss,
            lr,
            ev.map(|e| format!(" slot {:.4} exact {:.4}", e.slot_acc, e.exact)).unwrap_or_default()
        );
        if let Some(e) = ev {
            if out.best.is_none_or(|(_, b)| e.exact > b) {
                out.best = Some((step + 1, e.exact));
                if let Some(h) = hooks.on_best.as_mut() {
                    h(model, opt, step + 1)?;
                }
            }
            if last {
                out.final_eval = Some(e);
            }
        }
        if let Some(h) = hooks.on_metrics.as_mut() {
            h(&m)?;
        }
        out.metrics.push(m);
        since_log = Instant::now();
        tokens = 0;
    }
    Ok(out)
}

fn annotate(e: Error, step: usize, idx: &[usize]) -> Error {
    match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{op} at step {step}, batch examples {idx:?}"),
        },
        other => other,
    }
}

/// Greedy argmax at scored positions: slot accuracy and whole-sequence
/// exact match.
pub fn evaluate<S: Scalar>(model: &Model<S>, data: &[Example], batch: usize) -> Result<EvalResult> {
    let v = model.spec.vocab;
    let mut preds = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch.max(1)) {
        let t = check_lengths(chunk)?;
        let refs: Vec<&Example> = chunk.iter().collect();
        let (ids, _, _) = flatten(&refs);
        let tape = Tape::inference();
        let b = Binder::new(&tape);
        let logits = model.forward(&b, &ids, Seq::new(chunk.len(), t))?.logits;
        for (e, _) in chunk.iter().enumerate() {
            preds.push((0..t).map(|j| argmax(&logits.data()[(e * t + j) * v..(e * t + j + 1) * v])).collect());
        }
    }
    Ok(score(data, &preds))
}

/// Scores per-position predictions against the examples' targets.
pub fn score(data: &[Example], preds: &[Vec<usize>]) -> EvalResult {
    let mut slots = 0;
    let mut correct = 0;
    let mut exact = 0;
    for (ex, p) in data.iter().zip(preds) {
        let mut all = true;
        for j in ex.scored() {
            let ok = p[j] == ex.targets[j];
            slots += 1;
            correct += ok as usize;
            all &= ok;
        }
        exact += all as usize;
    }
    EvalResult {
        slot_acc: if slots == 0 { 0.0 } else { correct as f64 / slots as f64 },
        exact: if data.is_empty() { 0.0 } else { exact as f64 / data.len() as f64 },
        slots,
        examples: data.len(),
    }
}

/// Flattened logits for a set of equal-length examples.
pub fn logits<S: Scalar>(model: &Model<S>, data: &[Example]) -> Result<Vec<S>> {
    let t = check_lengths(data)?;
    let refs: Vec<&Example> = data.iter().collect();
    let (ids, _, _) = flatten(&refs);
    let tape = Tape::inference();
    let b = Binder::new(&tape);
    Ok(model.forward(&b, &ids, Seq::new(data.len(), t))?.logits.data().to_vec())
}
