//! Property suites run at fixed seeds: gradients, retrieval against brute
//! force, sparse against dense attention, mask structure, causality,
//! streaming against batch decoding, and the `α = 1` degeneracy.

use std::rc::Rc;
use std::time::{Duration, Instant};

use crate::layers::LayerKind;
use crate::params::{Binder, HasParams};
use crate::resona::{
    build_mask, dense_masked_attention, encode_chunks, encode_queries, topk_retrieve, AlphaMode, ChunkIndexing,
    Eligibility, Heads, RetrievalMask,
};
use crate::tasks::{gen_mqar, MqarConfig};
use crate::tensor::{grad_check_projected, Prng, Scalar, Seq, Tape, Tensor, Var};
use crate::trainer::{assemble, logits, same_stream, train, AdamW, Hooks, Model, ModelSpec, TrainConfig};
use crate::Result;

pub const SUITES: [&str; 7] = ["gradients", "retrieval", "sparse_dense", "mask", "causality", "streaming", "alpha"];

#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub seed: u64,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub module: &'static str,
    pub property: &'static str,
    pub cases: usize,
    /// Worst observed error, where the property has a tolerance.
    pub worst: Option<f64>,
    pub failures: Vec<Failure>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn line(&self) -> String {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        let worst = self.worst.map_or(String::new(), |w| format!(", worst {w:.3e}"));
        let mut s = format!(
            "{status} {} [{}] {}: {} cases{worst} in {:.2}s",
            self.suite,
            self.module,
            self.property,
            self.cases,
            self.elapsed.as_secs_f64()
        );
        for f in self.failures.iter().take(5) {
            s.push_str(&format!("\n    seed {}: {}", f.seed, f.detail));
        }
        if self.failures.len() > 5 {
            s.push_str(&format!("\n    ... {} more", self.failures.len() - 5));
        }
        s
    }
}

/// Case counts and the eligibility rule under test.
#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub eligibility: Eligibility,
    pub retrieval_cases: usize,
    pub sparse_cases: usize,
    pub mask_cases: usize,
    pub causality_cases: usize,
    pub streaming_cases: usize,
    pub grad_shapes: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            eligibility: Eligibility::Causal,
            retrieval_cases: 1000,
            sparse_cases: 200,
            mask_cases: 500,
            causality_cases: 200,
            streaming_cases: 50,
            grad_shapes: 5,
        }
    }
}

pub fn run_suite(name: &str, opts: &VerifyOptions) -> Result<SuiteReport> {
    match name {
        "gradients" => gradients(opts),
        "retrieval" => retrieval(opts),
        "sparse_dense" => sparse_dense(opts),
        "mask" => mask(opts),
        "causality" => causality(opts),
        "streaming" => streaming(opts),
        "alpha" => alpha(opts),
        other => Err(crate::Error::Config(format!(
            "unknown suite `{other}`; expected one of {}",
            SUITES.join(", ")
        ))),
    }
}

struct Run {
    t0: Instant,
    cases: usize,
    worst: Option<f64>,
    failures: Vec<Failure>,
}

impl Run {
    fn new() -> Self {
        Self {
            t0: Instant::now(),
            cases: 0,
            worst: None,
            failures: Vec::new(),
        }
    }

    fn err(&mut self, e: f64) {
        self.worst = Some(self.worst.map_or(e, |w| w.max(e)));
    }

    fn fail(&mut self, seed: u64, detail: String) {
        self.failures.push(Failure { seed, detail });
    }

    fn done(self, suite: &'static str, module: &'static str, property: &'static str) -> SuiteReport {
        SuiteReport {
            suite,
            module,
            property,
            cases: self.cases,
            worst: self.worst,
            failures: self.failures,
            elapsed: self.t0.elapsed(),
        }
    }
}

/// Replaces every trainable weight with noise so no branch is trivially
/// zero. Encoders and recurrence biases keep their initial values.
pub fn randomize<S: Scalar, M: HasParams<S> + ?Sized>(m: &mut M, seed: u64, std: f64) {
    let rng = Prng::new(seed).derive("randomize");
    m.visit_mut(&mut |p| {
        if p.name.ends_with(".b_a") || p.name.contains(".enc_") {
            return;
        }
        let mut r = rng.derive(&p.name);
        let base = if p.name.ends_with(".gain") { 1.0 } else { 0.0 };
        let shape = p.value.shape().to_vec();
        let noise = Tensor::<f64>::randn(shape.clone(), std, &mut r).expect("shape");
        let data = noise.data().iter().map(|v| S::from_f64_lossy(v + base)).collect();
        p.value = Tensor::new(shape, data).expect("shape").with_grad();
    });
}

/// A small random augmented model: width, depth, layer kind, augmented
/// layers, chunk size, `k` and `α` mode all drawn from `rng`.
pub fn random_model(rng: &mut Prng, vocab: usize, eligibility: Eligibility) -> Result<Model<f64>> {
    let d = [4, 8, 12][rng.below(3)];
    let n_layers = 1 + rng.below(3);
    let kind = if rng.below(2) == 0 {
        LayerKind::GatedRecurrence
    } else {
        LayerKind::LinearAttention { decay: 0.7 + 0.3 * rng.uniform() }
    };
    let mut layers: Vec<usize> = (0..n_layers).filter(|_| rng.below(2) == 0).collect();
    if layers.is_empty() {
        layers.push(rng.below(n_layers));
    }
    let mut spec = ModelSpec {
        n_layers,
        kind,
        state_width: d,
        ..ModelSpec::desk(vocab, d)
    }
    .with_resona(&layers);
    spec.resona.chunk_size = 1 + rng.below(4);
    spec.resona.top_k = 1 + rng.below(3);
    spec.resona.eligibility = eligibility;
    if rng.below(3) == 0 {
        spec.resona.alpha_mode = AlphaMode::Gated;
    } else {
        spec.resona.alpha = 0.1 + 0.8 * rng.uniform();
    }
    let mut m = assemble::<f64>(&spec, rng.next_u64())?;
    randomize(&mut m, rng.next_u64(), 0.4);
    Ok(m)
}

fn batch_logits(m: &Model<f64>, ids: &[usize]) -> Result<Vec<f64>> {
    let tape = Tape::inference();
    let b = Binder::new(&tape);
    Ok(m.forward(&b, ids, Seq::single(ids.len()))?.logits.data().to_vec())
}

type Objective = Box<dyn Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>>;

fn primitive_cases(m: usize, n: usize, rng: &mut Prng) -> Result<Vec<(&'static str, Tensor<f64>, Objective)>> {
    let x = Tensor::<f64>::randn([m, n], 1.0, rng)?;
    let other = Tensor::<f64>::randn([m, n], 1.0, rng)?;
    let right = Tensor::<f64>::randn([n, 3], 1.0, rng)?;
    let left = Tensor::<f64>::randn([2, m], 1.0, rng)?;
    let nt = Tensor::<f64>::randn([5, n], 1.0, rng)?;
    let bias = Tensor::<f64>::randn([n], 1.0, rng)?;
    let rows = Tensor::<f64>::randn([m, 1], 1.0, rng)?;
    let gain = Tensor::<f64>::rand_uniform([n], 0.5, 1.5, rng)?;
    let mask = Tensor::<f64>::from_fn([m, n], |i| if (i * 7 + m).is_multiple_of(3) { 0.0 } else { 1.0 })?;
    let targets: Vec<usize> = (0..m).map(|i| (i * 5 + m) % n).collect();
    let lmask: Vec<u8> = (0..m).map(|i| u8::from(i % 3 != 2)).collect();
    let ids: Vec<usize> = (0..4).map(|i| (i * 3 + n) % m).collect();
    let xs = x.clone();
    let c = |t: &Tensor<f64>| t.clone();
    let (o1, o2, o3) = (c(&other), c(&other), c(&other));
    let mut v: Vec<(&'static str, Tensor<f64>, Objective)> = vec![
        ("matmul", c(&x), Box::new(move |tp, x| tp.matmul(x, &tp.constant(right.clone())))),
        ("matmul (left operand)", c(&x), Box::new(move |tp, x| tp.matmul(&tp.constant(left.clone()), x))),
        ("matmul_nt", c(&x), Box::new(move |tp, x| tp.matmul_nt(x, &tp.constant(nt.clone())))),
        ("add", c(&x), Box::new(move |tp, x| tp.add(x, &tp.constant(o1.clone())))),
        ("sub", c(&x), Box::new(move |tp, x| tp.sub(&tp.constant(o2.clone()), x))),
        ("mul", c(&x), Box::new(move |tp, x| tp.mul(x, &tp.constant(o3.clone())))),
        ("affine", c(&x), Box::new(|tp, x| Ok(tp.affine(x, -1.5, 0.3)))),
        ("add_row", c(&x), Box::new(move |tp, x| tp.add_row(x, &tp.constant(bias.clone())))),
        ("scale_rows", c(&x), Box::new(move |tp, x| tp.scale_rows(x, &tp.constant(rows.clone())))),
        ("sigmoid", c(&x), Box::new(|tp, x| Ok(tp.sigmoid(x)))),
        ("silu", c(&x), Box::new(|tp, x| Ok(tp.silu(x)))),
        ("mean", c(&x), Box::new(|tp, x| Ok(tp.mean(x)))),
        ("masked_softmax", c(&x), Box::new(move |tp, x| tp.masked_softmax(x, &mask))),
        ("cross_entropy", c(&x), Box::new(move |tp, x| tp.cross_entropy(x, &targets, &lmask))),
        ("embed", c(&x), Box::new(move |tp, x| tp.embed(&ids, x))),
    ];
    let g2 = gain.clone();
    v.push(("rmsnorm", c(&x), Box::new(move |tp, x| tp.rmsnorm(x, &tp.constant(g2.clone()), 1e-6))));
    v.push(("rmsnorm (gain)", gain, Box::new(move |tp, g| tp.rmsnorm(&tp.constant(xs.clone()), g, 1e-6))));
    Ok(v)
}

fn scan_cases(b: usize, len: usize, h: usize, rng: &mut Prng) -> Result<Vec<(&'static str, Tensor<f64>, Objective)>> {
    let seq = Seq::new(b, len);
    let rows = b * len;
    let a = Tensor::<f64>::rand_uniform([rows, h], 0.05, 0.95, rng)?;
    let u = Tensor::<f64>::randn([rows, h], 1.0, rng)?;
    let h0 = Tensor::<f64>::randn([h], 1.0, rng)?;
    let q = Tensor::<f64>::randn([rows, h], 1.0, rng)?;
    let k = Tensor::<f64>::randn([rows, h], 1.0, rng)?;
    let v = Tensor::<f64>::randn([rows, h], 1.0, rng)?;
    let s0 = Tensor::<f64>::randn([h, h], 1.0, rng)?;
    let (a1, u1, h01, h02) = (a.clone(), u.clone(), h0.clone(), h0.clone());
    let mut out: Vec<(&'static str, Tensor<f64>, Objective)> = vec![
        ("gated_scan (gate)", a.clone(), Box::new(move |tp, a| tp.gated_scan(a, &tp.constant(u1.clone()), seq, Some(&h01)))),
        ("gated_scan (input)", u.clone(), Box::new(move |tp, u| tp.gated_scan(&tp.constant(a1.clone()), u, seq, Some(&h02)))),
    ];
    for (which, name) in ["linear_attention_scan (q)", "linear_attention_scan (k)", "linear_attention_scan (v)"].into_iter().enumerate() {
        let (q, k, v, s0) = (q.clone(), k.clone(), v.clone(), s0.clone());
        let x = [&q, &k, &v][which].clone();
        out.push((
            name,
            x,
            Box::new(move |tp, x| {
                let vars: Vec<Var<f64>> = (0..3).map(|i| if i == which { x.clone() } else { tp.constant([&q, &k, &v][i].clone()) }).collect();
                tp.linear_attention_scan(&vars[0], &vars[1], &vars[2], seq, 0.8, Some(&s0)).map(|(r, _)| r)
            }),
        ));
    }
    Ok(out)
}

fn random_masks(rng: &mut Prng, seq: Seq, u: usize, k: usize) -> Result<Vec<RetrievalMask>> {
    let idx = ChunkIndexing::new(seq.len, u)?;
    (0..seq.batch)
        .map(|_| {
            let sets = (0..seq.len)
                .map(|j| {
                    let n = Eligibility::Causal.eligible_count(idx.chunks, u, j);
                    let mut s = rng.sample_distinct(n, k.min(n));
                    s.sort_unstable();
                    s
                })
                .collect();
            build_mask(sets, &idx, Eligibility::Causal)
        })
        .collect()
}

fn attention_cases(rng: &mut Prng) -> Result<Vec<(&'static str, Tensor<f64>, Objective)>> {
    let heads = Heads {
        heads: 1 + rng.below(2),
        head_dim: 1 + rng.below(3),
    };
    let seq = Seq::new(1 + rng.below(2), 3 + rng.below(6));
    let u = 1 + rng.below(2);
    let k = 1 + rng.below(2);
    let masks = Rc::new(random_masks(rng, seq, u, k)?);
    let a = heads.width();
    let q = Tensor::<f64>::randn([seq.rows(), a], 1.0, rng)?;
    let k = Tensor::<f64>::randn([seq.rows(), a], 1.0, rng)?;
    let v = Tensor::<f64>::randn([seq.rows(), a], 1.0, rng)?;
    let mut out: Vec<(&'static str, Tensor<f64>, Objective)> = Vec::new();
    for (which, name) in ["span_attention (q)", "span_attention (k)", "span_attention (v)"].into_iter().enumerate() {
        let (q, k, v, masks) = (q.clone(), k.clone(), v.clone(), masks.clone());
        let x = [&q, &k, &v][which].clone();
        out.push((
            name,
            x,
            Box::new(move |tp, x| {
                let vars: Vec<Var<f64>> = (0..3).map(|i| if i == which { x.clone() } else { tp.constant([&q, &k, &v][i].clone()) }).collect();
                tp.span_attention(&vars[0], &vars[1], &vars[2], seq, masks.clone(), heads)
            }),
        ));
    }
    Ok(out)
}

/// Gradient of a full augmented block with respect to its input, and of
/// a whole model's loss with respect to the embedding table.
fn block_cases(rng: &mut Prng) -> Result<Vec<(&'static str, Tensor<f64>, Objective)>> {
    let m = random_model(rng, 16, Eligibility::Causal)?;
    let len = 6 + rng.below(7);
    let d = m.spec.d_model;
    let ids: Vec<usize> = (0..len).map(|_| rng.below(16)).collect();
    let x = Tensor::<f64>::randn([len, d], 1.0, rng)?;
    let block = m.blocks.iter().find(|b| b.resona.is_some()).cloned().expect("augmented layer");
    let targets: Vec<usize> = (0..len).map(|_| rng.below(16)).collect();
    let table = m.embed.table.value.clone();
    let model = Rc::new(m);
    Ok(vec![
        (
            "retrieval-augmented block",
            x,
            Box::new(move |tp, xv| {
                let b = Binder::new(tp);
                // the same tensor feeds the block input and the retrieval
                // source, so both paths are checked
                Ok(block.forward(&b, xv, xv, Seq::single(len), None)?.y)
            }),
        ),
        (
            "model loss (embedding table)",
            table,
            Box::new(move |tp, tv| {
                let b = Binder::new(tp);
                b.override_param(&model.embed.table.name, tv.clone());
                let logits = model.forward(&b, &ids, Seq::single(len))?.logits;
                tp.cross_entropy(&logits, &targets, &vec![1; len])
            }),
        ),
    ])
}

fn gradients(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut run = Run::new();
    let shapes = [(1, 1), (2, 3), (4, 2), (3, 5), (6, 4), (5, 1), (2, 7)];
    let scans = [(1, 1, 1), (1, 5, 3), (2, 4, 2), (3, 3, 4), (2, 7, 3), (1, 9, 2), (2, 2, 5)];
    for i in 0..opts.grad_shapes {
        let seed = opts.seed.wrapping_add(100 + i as u64);
        let mut rng = Prng::new(seed).derive("gradients");
        let (m, n) = shapes[i % shapes.len()];
        let (b, len, h) = scans[i % scans.len()];
        let mut cases = primitive_cases(m, n, &mut rng)?;
        cases.extend(scan_cases(b, len, h, &mut rng)?);
        cases.extend(attention_cases(&mut rng)?);
        cases.extend(block_cases(&mut rng)?);
        for (name, x, f) in cases {
            run.cases += 1;
            match grad_check_projected(f, &x, 1e-5, seed) {
                Ok(e) => {
                    run.err(e);
                    if e > 1e-4 {
                        run.fail(seed, format!("{name} on shape {:?}: relative error {e:.3e}", x.shape()));
                    }
                }
                Err(e) => run.fail(seed, format!("{name}: {e}")),
            }
        }
    }
    Ok(run.done("gradients", "tensors", "tape gradients match central differences within 1e-4"))
}

/// Independent reference: full sort of every eligible cosine by
/// (score descending, index ascending), eligibility from `(c+1)·U ≤ j`.
fn brute_topk(q: &[f64], chunks: &[Vec<f64>], u: usize, j: usize, k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = chunks
        .iter()
        .enumerate()
        .filter(|(c, _)| (c + 1) * u <= j)
        .map(|(c, v)| (q.iter().zip(v).map(|(a, b)| a * b).sum(), c))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, c)| c).collect()
}

fn retrieval(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut run = Run::new();
    let root = Prng::new(opts.seed).derive("retrieval");
    for i in 0..opts.retrieval_cases {
        let seed = i as u64;
        let mut rng = root.derive_index(seed);
        let (t, u, k, d, e) = (2 + rng.below(63), 1 + rng.below(4), 1 + rng.below(4), 2 + rng.below(6), 1 + rng.below(6));
        let mut x0 = Tensor::<f64>::randn([t, d], 1.0, &mut rng)?;
        // duplicated chunks produce exact score ties
        if t >= 2 * u && rng.below(2) == 0 {
            let (a, b) = (rng.below(t / u), rng.below(t / u));
            let row: Vec<f64> = x0.data()[a * u * d..(a + 1) * u * d].to_vec();
            x0.data_mut()[b * u * d..(b + 1) * u * d].copy_from_slice(&row);
        }
        let h = Tensor::<f64>::randn([t, d], 1.0, &mut rng)?;
        let enc_c = Tensor::<f64>::randn([d, e], 1.0, &mut rng)?;
        let enc_q = Tensor::<f64>::randn([d, e], 1.0, &mut rng)?;
        let idx = ChunkIndexing::new(t, u)?;
        let cbar = encode_chunks(&x0.data()[..idx.chunks * u * d], &idx, &enc_c);
        let qbar = encode_queries(h.data(), &enc_q);
        let sets = topk_retrieve(&qbar, &cbar, k, &idx, opts.eligibility);
        let chunks: Vec<Vec<f64>> = (0..cbar.rows).map(|c| cbar.row(c).to_vec()).collect();
        run.cases += 1;
        for j in 0..t {
            let want = brute_topk(qbar.row(j), &chunks, u, j, k);
            if sets[j] != want {
                run.fail(seed, format!("T={t} U={u} k={k}: position {j} retrieved {:?}, brute force {:?}", sets[j], want));
                break;
            }
        }
    }
    Ok(run.done("retrieval", "resona", "top-k indices equal brute-force cosine ranking with lower-index ties"))
}

fn sparse_dense(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut run = Run::new();
    let root = Prng::new(opts.seed).derive("sparse_dense");
    for i in 0..opts.sparse_cases {
        let seed = i as u64;
        let mut rng = root.derive_index(seed);
        let heads = Heads {
            heads: 1 + rng.below(3),
            head_dim: 1 + rng.below(5),
        };
        let seq = Seq::new(1 + rng.below(3), 1 + rng.below(40));
        let (u, k) = (1 + rng.below(4), 1 + rng.below(3));
        let masks = random_masks(&mut rng, seq, u, k)?;
        let a = heads.width();
        let tape = Tape::inference();
        let [q, k, v] = [0, 1, 2].map(|_| tape.constant(Tensor::<f64>::randn([seq.rows(), a], 1.5, &mut rng).expect("shape")));
        let sparse = tape.span_attention(&q, &k, &v, seq, Rc::new(masks.clone()), heads)?;
        let mut worst = 0.0f64;
        for (bi, m) in masks.iter().enumerate() {
            let rows = bi * seq.len * a..(bi + 1) * seq.len * a;
            let slice = |x: &Var<f64>| tape.constant(Tensor::new([seq.len, a], x.data()[rows.clone()].to_vec()).expect("shape"));
            let dense = dense_masked_attention(&tape, &slice(&q), &slice(&k), &slice(&v), &m.dense()?, heads)?;
            for (x, y) in sparse.data()[rows.clone()].iter().zip(dense.data()) {
                worst = worst.max((x - y).abs());
            }
        }
        run.cases += 1;
        run.err(worst);
        if worst > 1e-10 {
            run.fail(seed, format!("batch {} T={} heads {:?}: max abs diff {worst:.3e}", seq.batch, seq.len, heads));
        }
    }
    Ok(run.done("sparse_dense", "resona", "gathered attention equals dense masked attention within 1e-10"))
}

fn mask(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut run = Run::new();
    let root = Prng::new(opts.seed).derive("mask");
    for i in 0..opts.mask_cases {
        let seed = i as u64;
        let mut rng = root.derive_index(seed);
        let (t, u, k, d) = (1 + rng.below(96), 1 + rng.below(6), 1 + rng.below(4), 2 + rng.below(6));
        let x0 = Tensor::<f64>::randn([t, d], 1.0, &mut rng)?;
        let h = Tensor::<f64>::randn([t, d], 1.0, &mut rng)?;
        let enc = Tensor::<f64>::randn([d, d], 1.0, &mut rng)?;
        let idx = ChunkIndexing::new(t, u)?;
        let cbar = encode_chunks(&x0.data()[..idx.chunks * u * d], &idx, &enc);
        let qbar = encode_queries(h.data(), &enc);
        let sets = topk_retrieve(&qbar, &cbar, k, &idx, opts.eligibility);
        run.cases += 1;
        let m = match build_mask(sets, &idx, opts.eligibility) {
            Ok(m) => m,
            Err(e) => {
                run.fail(seed, format!("T={t} U={u} k={k}: {e}"));
                continue;
            }
        };
        let dense = m.dense::<f64>()?;
        'rows: for j in 0..t {
            let row = &dense.data()[j * t..(j + 1) * t];
            let ones = row.iter().filter(|v| **v == 1.0).count();
            let runs = (0..t).filter(|&c| row[c] == 1.0 && (c == 0 || row[c - 1] != 1.0)).count();
            let late = (0..t).find(|&c| row[c] == 1.0 && c >= j);
            let bad = if ones > k * u {
                Some(format!("{ones} ones exceed k·U = {}", k * u))
            } else if runs > k {
                Some(format!("{runs} runs exceed k = {k}"))
            } else {
                late.map(|c| format!("column {c} is not strictly before the row"))
            };
            if let Some(b) = bad {
                run.fail(seed, format!("T={t} U={u} k={k}: row {j}: {b}"));
                break 'rows;
            }
        }
    }
    Ok(run.done("mask", "resona", "every mask row has at most k·U ones in at most k runs, all strictly prior"))
}

fn causality(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut run = Run::new();
    let root = Prng::new(opts.seed).derive("causality");
    let vocab = 24;
    for i in 0..opts.causality_cases {
        let seed = i as u64;
        let mut rng = root.derive_index(seed);
        let m = random_model(&mut rng, vocab, opts.eligibility)?;
        let t = 2 + rng.below(63);
        let ids: Vec<usize> = (0..t).map(|_| rng.below(vocab)).collect();
        let p = 1 + rng.below(t - 1);
        let mut changed = ids.clone();
        changed[p] = (ids[p] + 1 + rng.below(vocab - 1)) % vocab;
        let a = batch_logits(&m, &ids)?;
        let b = batch_logits(&m, &changed)?;
        run.cases += 1;
        if let Some(j) = (0..p).find(|&j| a[j * vocab..(j + 1) * vocab] != b[j * vocab..(j + 1) * vocab]) {
            run.fail(
                seed,
                format!(
                    "perturbing position {p} changed the logits at position {j} (T={t}, U={}, k={}, layers {:?})",
                    m.spec.resona.chunk_size, m.spec.resona.top_k, m.spec.resona_layers
                ),
            );
        }
    }
    Ok(run.done("causality", "resona", "perturbing position p leaves logits before p bit-identical"))
}

fn streaming(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut run = Run::new();
    let root = Prng::new(opts.seed).derive("streaming");
    let vocab = 24;
    for i in 0..opts.streaming_cases {
        let seed = i as u64;
        let mut rng = root.derive_index(seed);
        let m = random_model(&mut rng, vocab, Eligibility::Causal)?;
        let t = 1 + rng.below(64);
        let ids: Vec<usize> = (0..t).map(|_| rng.below(vocab)).collect();
        let batch = batch_logits(&m, &ids)?;
        let mut s = m.start();
        let mut worst = 0.0f64;
        for (j, &id) in ids.iter().enumerate() {
            let row = m.step(&mut s, id)?;
            for (x, y) in row.iter().zip(&batch[j * vocab..(j + 1) * vocab]) {
                worst = worst.max((x - y).abs());
            }
        }
        run.cases += 1;
        run.err(worst);
        if worst > 1e-10 {
            run.fail(seed, format!("T={t} U={}: max abs diff {worst:.3e}", m.spec.resona.chunk_size));
        }
    }
    Ok(run.done("streaming", "trainer", "token-by-token decoding equals batch logits within 1e-10"))
}

/// Baseline and `α = 1` models from the same seed, trained for a few
/// steps on the same data.
fn alpha(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut run = Run::new();
    for i in 0..3u64 {
        let seed = opts.seed.wrapping_add(i);
        let mut base_spec = ModelSpec::desk(32, 16);
        base_spec.n_layers = 2;
        let mut aug_spec = base_spec.clone().with_resona(&[0, 1]);
        aug_spec.resona.alpha = 1.0;
        let data = gen_mqar(&MqarConfig::new(32, 4, 24), seed, 48)?;
        let cfg = TrainConfig {
            steps: 8,
            batch_size: 8,
            log_every: 2,
            eval_every: 4,
            seed,
            ..TrainConfig::default()
        };
        let mut streams = Vec::new();
        let mut finals = Vec::new();
        for spec in [&base_spec, &aug_spec] {
            let mut m = assemble::<f64>(spec, seed)?;
            let mut opt = AdamW::new(cfg.weight_decay);
            let out = train(&mut m, &mut opt, &data[..40], &data[40..], &cfg, 0, &mut Hooks::default())?;
            streams.push(out.metrics);
            finals.push(logits(&m, &data[40..])?);
        }
        run.cases += 1;
        if !same_stream(&streams[0], &streams[1]) {
            run.fail(seed, "training metric streams differ".into());
        }
        let diff = finals[0].iter().zip(&finals[1]).position(|(a, b)| a.to_bits() != b.to_bits());
        if let Some(p) = diff {
            run.fail(seed, format!("logit {p} differs after training"));
        }
    }
    Ok(run.done("alpha", "trainer", "alpha = 1 gives bit-identical logits and metrics to the baseline"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyOptions {
        VerifyOptions {
            retrieval_cases: 50,
            sparse_cases: 20,
            mask_cases: 50,
            causality_cases: 30,
            streaming_cases: 5,
            grad_shapes: 1,
            ..VerifyOptions::default()
        }
    }

    #[test]
    fn suites_pass_on_the_real_rule() {
        for s in SUITES {
            let r = run_suite(s, &quick()).unwrap();
            assert!(r.passed(), "{}", r.line());
            assert!(r.cases > 0);
        }
    }

    #[test]
    fn off_by_one_eligibility_is_caught() {
        let opts = VerifyOptions {
            eligibility: Eligibility::OffByOneChunk,
            ..quick()
        };
        let r = run_suite("causality", &opts).unwrap();
        assert!(!r.passed());
        assert!(r.failures[0].detail.contains("changed the logits at position"), "{}", r.line());
        assert!(!run_suite("mask", &opts).unwrap().passed());
        assert!(!run_suite("retrieval", &opts).unwrap().passed());
    }

    #[test]
    fn unknown_suite() {
        assert!(run_suite("nope", &quick()).is_err());
    }
}
