//! Browser bindings: MQAR example generation, a chunk-retrieval explorer
//! on a freshly initialised model, and the learning-rate schedule.
//!
//! Every export returns JSON text (or a float array) so the page needs no
//! glue beyond `JSON.parse`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use resona::params::Binder;
use resona::tasks::{gen_mqar, Example, MqarConfig};
use resona::tensor::{Seq, Tape};
use resona::trainer::{assemble, lr_at, ModelSpec};

#[derive(Serialize)]
struct ExampleView {
    tokens: Vec<usize>,
    targets: Vec<usize>,
    scored: Vec<usize>,
}

impl From<&Example> for ExampleView {
    fn from(ex: &Example) -> Self {
        Self {
            tokens: ex.tokens.clone(),
            targets: ex.targets.clone(),
            scored: ex.scored().collect(),
        }
    }
}

#[derive(Serialize)]
struct RetrievalRow {
    pos: usize,
    chunks: Vec<usize>,
    /// the retrieved chunks contain the (query key, target value) pair
    hit: bool,
}

#[derive(Serialize)]
struct RetrievalView {
    example: ExampleView,
    chunk_size: usize,
    top_k: usize,
    rows: Vec<RetrievalRow>,
    hits: usize,
}

fn one_example(vocab: usize, len: usize, pairs: usize, seed: u64) -> Result<Example, String> {
    let cfg = MqarConfig::new(vocab, pairs, len);
    let mut v = gen_mqar(&cfg, seed, 1).map_err(|e| e.to_string())?;
    Ok(v.remove(0))
}

pub fn example_json(vocab: usize, len: usize, pairs: usize, seed: u64) -> Result<String, String> {
    let ex = one_example(vocab, len, pairs, seed)?;
    serde_json::to_string(&ExampleView::from(&ex)).map_err(|e| e.to_string())
}

/// Runs chunk-and-search at layer 0 of an untrained width-64 model on one
/// MQAR example and reports which chunks every scored position retrieves.
pub fn retrieval_json(
    vocab: usize,
    len: usize,
    pairs: usize,
    chunk_size: usize,
    top_k: usize,
    seed: u64,
) -> Result<String, String> {
    let ex = one_example(vocab, len, pairs, seed)?;
    let mut spec = ModelSpec::desk(vocab, 64).with_resona(&[0]);
    spec.n_layers = 1;
    spec.resona.chunk_size = chunk_size;
    spec.resona.top_k = top_k;
    let model = assemble::<f64>(&spec, seed).map_err(|e| e.to_string())?;
    let r = model.blocks[0].resona.as_ref().ok_or("model has no retrieval layer")?;
    let tape = Tape::inference();
    let b = Binder::new(&tape);
    let x0 = model.embed.embed(&b, &ex.tokens).map_err(|e| e.to_string())?;
    let masks = r.retrieve(x0.data(), x0.data(), Seq::single(len)).map_err(|e| e.to_string())?;
    let mask = &masks[0];
    let rows: Vec<RetrievalRow> = ex
        .scored()
        .map(|j| {
            let span = |c: usize| c * chunk_size..(c + 1) * chunk_size;
            let hit = mask.sets[j].iter().any(|&c| {
                span(c)
                    .zip(span(c).skip(1))
                    .any(|(p, q)| ex.tokens[p] == ex.tokens[j] && ex.tokens[q] == ex.targets[j])
            });
            RetrievalRow {
                pos: j,
                chunks: mask.sets[j].clone(),
                hit,
            }
        })
        .collect();
    let hits = rows.iter().filter(|r| r.hit).count();
    let view = RetrievalView {
        example: ExampleView::from(&ex),
        chunk_size,
        top_k,
        rows,
        hits,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

pub fn schedule(steps: usize, lr: f64, warmup: f64) -> Vec<f64> {
    (0..steps).map(|s| lr_at(s, steps, lr, warmup)).collect()
}

#[wasm_bindgen]
pub fn mqar_example(vocab: usize, len: usize, pairs: usize, seed: u32) -> Result<String, JsValue> {
    example_json(vocab, len, pairs, seed.into()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn explore_retrieval(vocab: usize, len: usize, pairs: usize, chunk_size: usize, top_k: usize, seed: u32) -> Result<String, JsValue> {
    retrieval_json(vocab, len, pairs, chunk_size, top_k, seed.into()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn lr_schedule(steps: usize, lr: f64, warmup: f64) -> Vec<f64> {
    schedule(steps, lr, warmup)
}
