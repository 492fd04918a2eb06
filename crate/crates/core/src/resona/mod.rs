//! Retrieval augmentation for a recurrent layer.
//!
//! Complete chunks of the embedding sequence `X0` are encoded and searched
//! by cosine similarity from a per-position query; each position then
//! attends over the tokens of its retrieved chunks, and the result is mixed
//! into the recurrent layer output as `α·Yᵐ + (1-α)·Yʳ`.

mod attention;
mod retrieval;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

pub use attention::{attend_row, dense_masked_attention, Heads};
pub use retrieval::{
    build_mask, chunk_context, chunk_mean, encode_chunks, encode_queries, encode_row, topk_retrieve, topk_row,
    ChunkIndexing, Eligibility, RetrievalMask, UnitRows, NORM_FLOOR,
};

use crate::error::{Error, Result};
use crate::params::{Binder, HasParams, Param, ParamGroup};
use crate::tensor::{dense_gemm, lit, sigmoid, Prng, Scalar, Seq, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    #[default]
    Fixed,
    /// `α_t = sigmoid(x_t · w + b)` from the block's normalised input.
    Gated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResonaConfig {
    pub chunk_size: usize,
    pub top_k: usize,
    pub enc_width: usize,
    pub heads: usize,
    pub head_dim: usize,
    #[serde(default)]
    pub alpha_mode: AlphaMode,
    pub alpha: f64,
    #[serde(default)]
    pub eligibility: Eligibility,
}

impl ResonaConfig {
    /// Two heads of width `D/2`, encoder width `D`, `α = 0.5`.
    pub fn desk(d_model: usize, chunk_size: usize, top_k: usize) -> Self {
        Self {
            chunk_size,
            top_k,
            enc_width: d_model,
            heads: 2,
            head_dim: (d_model / 2).max(1),
            alpha_mode: AlphaMode::Fixed,
            alpha: 0.5,
            eligibility: Eligibility::Causal,
        }
    }

    pub fn attn(&self) -> Heads {
        Heads {
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.chunk_size == 0 {
            return bad("chunk size must be at least 1");
        }
        if self.top_k == 0 {
            return bad("top-k must be at least 1");
        }
        if self.enc_width == 0 || self.heads == 0 || self.head_dim == 0 {
            return bad("encoder width, head count and head width must be positive");
        }
        if self.alpha_mode == AlphaMode::Fixed && !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Parameters of one augmentation site.
#[derive(Clone, Debug)]
pub struct ResonaLayer<S: Scalar> {
    pub cfg: ResonaConfig,
    /// Context encoder `𝒞: D → E`.
    pub enc_c: Param<S>,
    /// Query encoder `𝒬: H → E`.
    pub enc_q: Param<S>,
    pub w_q: Param<S>,
    pub w_k: Param<S>,
    pub w_v: Param<S>,
    pub w_out: Param<S>,
    pub gate: Option<(Param<S>, Param<S>)>,
}

impl<S: Scalar> ResonaLayer<S> {
    /// `query_width` is the width of the query source (`D` when queries
    /// come from the embeddings). When it equals `D` the query encoder
    /// starts as a copy of the context encoder, so that a query matches
    /// the chunks containing the same content before any training.
    /// Orthonormal encoders keep encoded cosines close to the cosines of
    /// the inputs. The
    /// retrieval indices carry no gradient, so the encoders keep their
    /// initial values.
    pub fn init(prefix: &str, d_model: usize, query_width: usize, cfg: ResonaConfig, rng: &Prng) -> Result<Self> {
        cfg.validate()?;
        let g = ParamGroup::Resona;
        let a = cfg.heads * cfg.head_dim;
        let e = cfg.enc_width;
        let std_c = 1.0 / (d_model as f64).sqrt();
        let mut enc_c = Param::orthogonal(format!("{prefix}.enc_c"), d_model, e, rng, g)?;
        enc_c.decay = false;
        let mut enc_q = if query_width == d_model {
            Param::new(format!("{prefix}.enc_q"), enc_c.value.clone(), g, false)
        } else {
            Param::orthogonal(format!("{prefix}.enc_q"), query_width, e, rng, g)?
        };
        enc_q.decay = false;
        let gate = match cfg.alpha_mode {
            AlphaMode::Fixed => None,
            AlphaMode::Gated => Some((
                Param::normal(format!("{prefix}.gate_w"), &[d_model, 1], 0.02, rng, g)?,
                Param::zeros(format!("{prefix}.gate_b"), &[1], g, false)?,
            )),
        };
        Ok(Self {
            w_q: Param::normal(format!("{prefix}.w_q"), &[query_width, a], 1.0 / (query_width as f64).sqrt(), rng, g)?,
            w_k: Param::normal(format!("{prefix}.w_k"), &[d_model, a], std_c, rng, g)?,
            w_v: Param::normal(format!("{prefix}.w_v"), &[d_model, a], std_c, rng, g)?,
            w_out: Param::zeros(format!("{prefix}.w_out"), &[a, d_model], g, true)?,
            cfg,
            enc_c,
            enc_q,
            gate,
        })
    }

    pub fn d_model(&self) -> usize {
        self.enc_c.value.shape()[0]
    }

    pub fn query_width(&self) -> usize {
        self.enc_q.value.shape()[0]
    }

    /// Chunk-and-search for each sequence of the batch.
    pub fn retrieve(&self, qsrc: &[S], x0: &[S], seq: Seq) -> Result<Vec<RetrievalMask>> {
        let (d, hq) = (self.d_model(), self.query_width());
        (0..seq.batch)
            .map(|b| {
                let xs = &x0[b * seq.len * d..(b + 1) * seq.len * d];
                let hs = &qsrc[b * seq.len * hq..(b + 1) * seq.len * hq];
                let (idx, chunks) = chunk_context(xs, d, self.cfg.chunk_size)?;
                let cbar = encode_chunks(&chunks, &idx, &self.enc_c.value);
                let qbar = encode_queries(hs, &self.enc_q.value);
                let sets = topk_retrieve(&qbar, &cbar, self.cfg.top_k, &idx, self.cfg.eligibility);
                build_mask(sets, &idx, self.cfg.eligibility)
            })
            .collect()
    }

    /// Knowledge integration `Yʳ = CrossAttn(qsrc·W_Q, X0·W_K, X0·W_V, M)·W_out`.
    /// Returns `Yʳ` and the masks used.
    pub fn integrate(
        &self,
        b: &Binder<S>,
        qsrc: &Var<S>,
        x0: &Var<S>,
        seq: Seq,
    ) -> Result<(Var<S>, Rc<Vec<RetrievalMask>>)> {
        if qsrc.shape() != [seq.rows(), self.query_width()] || x0.shape() != [seq.rows(), self.d_model()] {
            return Err(Error::Shape {
                op: "resona integrate",
                lhs: qsrc.shape().to_vec(),
                rhs: x0.shape().to_vec(),
            });
        }
        let masks = Rc::new(self.retrieve(qsrc.data(), x0.data(), seq)?);
        let tape = b.tape();
        let q = tape.matmul(qsrc, &b.bind(&self.w_q))?;
        let k = tape.matmul(x0, &b.bind(&self.w_k))?;
        let v = tape.matmul(x0, &b.bind(&self.w_v))?;
        let o = tape.span_attention(&q, &k, &v, seq, masks.clone(), self.cfg.attn())?;
        Ok((tape.matmul(&o, &b.bind(&self.w_out))?, masks))
    }

    /// `α·Yᵐ + (1-α)·Yʳ`; `xn` feeds the optional gate.
    pub fn mix(&self, b: &Binder<S>, ym: &Var<S>, yr: &Var<S>, xn: &Var<S>) -> Result<Var<S>> {
        let tape = b.tape();
        match &self.gate {
            None => {
                let a = self.cfg.alpha;
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::Config(format!("alpha must lie in [0, 1], got {a}")));
                }
                tape.add(&tape.scale(ym, lit(a)), &tape.scale(yr, lit(1.0 - a)))
            }
            Some((w, bias)) => {
                let alpha = tape.sigmoid(&tape.add_row(&tape.matmul(xn, &b.bind(w))?, &b.bind(bias))?);
                let rest = tape.affine(&alpha, -S::one(), S::one());
                tape.add(&tape.scale_rows(ym, &alpha)?, &tape.scale_rows(yr, &rest)?)
            }
        }
    }

    fn alpha_row(&self, xn: &[S]) -> S {
        match &self.gate {
            None => lit(self.cfg.alpha),
            Some((w, bias)) => {
                let z: S = xn.iter().zip(w.value.data()).map(|(a, b)| *a * *b).sum();
                sigmoid(z + bias.value.data()[0])
            }
        }
    }

    /// One decoding step at position `cache.len()`. Returns the mixed row
    /// and the retrieved chunk set.
    pub fn step(
        &self,
        cache: &mut ChunkCache<S>,
        x0: &[S],
        qsrc: &[S],
        xn: &[S],
        ym: &[S],
    ) -> Result<(Vec<S>, Vec<usize>)> {
        if self.cfg.eligibility != Eligibility::Causal {
            return Err(Error::Config("incremental decoding requires causal eligibility".into()));
        }
        let (d, hq, a) = (self.d_model(), self.query_width(), self.cfg.heads * self.cfg.head_dim);
        let j = cache.len;
        let mut k = vec![S::zero(); a];
        let mut v = vec![S::zero(); a];
        dense_gemm(1, d, a, x0, false, self.w_k.value.data(), false, &mut k, false);
        dense_gemm(1, d, a, x0, false, self.w_v.value.data(), false, &mut v, false);
        cache.keys.extend_from_slice(&k);
        cache.vals.extend_from_slice(&v);

        let u = self.cfg.chunk_size;
        let eligible = Eligibility::Causal.eligible_count(cache.chunks.rows, u, j);
        let qbar = encode_row(qsrc, &self.enc_q.value);
        let mut set = topk_row(&qbar, &cache.chunks, eligible, self.cfg.top_k);
        set.sort_unstable();

        let mut q = vec![S::zero(); a];
        dense_gemm(1, hq, a, qsrc, false, self.w_q.value.data(), false, &mut q, false);
        let pos: Vec<usize> = set.iter().flat_map(|&c| c * u..(c + 1) * u).collect();
        let mut o = vec![S::zero(); a];
        let mut probs = Vec::new();
        attend_row(
            &q,
            pos.len(),
            |i| &cache.keys[pos[i] * a..(pos[i] + 1) * a],
            |i| &cache.vals[pos[i] * a..(pos[i] + 1) * a],
            self.cfg.attn(),
            &mut o,
            &mut probs,
        );
        let mut yr = vec![S::zero(); d];
        dense_gemm(1, a, d, &o, false, self.w_out.value.data(), false, &mut yr, false);

        let alpha = self.alpha_row(xn);
        let y = ym.iter().zip(&yr).map(|(m, r)| alpha * *m + (S::one() - alpha) * *r).collect();

        cache.pending.extend_from_slice(x0);
        cache.len += 1;
        if cache.pending.len() == u * d {
            let c = encode_row(&chunk_mean(&cache.pending, d), &self.enc_c.value);
            cache.chunks.push(&c);
            cache.pending.clear();
        }
        Ok((y, set))
    }
}

impl<S: Scalar> HasParams<S> for ResonaLayer<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        for p in [&self.enc_c, &self.enc_q, &self.w_q, &self.w_k, &self.w_v, &self.w_out] {
            f(p);
        }
        if let Some((w, b)) = &self.gate {
            f(w);
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        for p in [
            &mut self.enc_c,
            &mut self.enc_q,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_out,
        ] {
            f(p);
        }
        if let Some((w, b)) = &mut self.gate {
            f(w);
            f(b);
        }
    }
}

/// Growing chunk-embedding cache for autoregressive decoding. A chunk is
/// encoded and appended as soon as its last token arrives.
#[derive(Clone, Debug)]
pub struct ChunkCache<S: Scalar> {
    len: usize,
    pending: Vec<S>,
    pub chunks: UnitRows<S>,
    keys: Vec<S>,
    vals: Vec<S>,
}

impl<S: Scalar> ChunkCache<S> {
    pub fn new(enc_width: usize) -> Self {
        Self {
            len: 0,
            pending: Vec::new(),
            chunks: UnitRows::empty(enc_width),
            keys: Vec::new(),
            vals: Vec::new(),
        }
    }

    /// Cache after a batched pass over the prompt rows `x0: [T, D]`.
    pub fn prefill(layer: &ResonaLayer<S>, x0: &[S]) -> Result<Self> {
        let d = layer.d_model();
        let a = layer.cfg.heads * layer.cfg.head_dim;
        let t = x0.len() / d;
        let (idx, chunks) = chunk_context(x0, d, layer.cfg.chunk_size)?;
        let mut keys = vec![S::zero(); t * a];
        let mut vals = vec![S::zero(); t * a];
        dense_gemm(t, d, a, x0, false, layer.w_k.value.data(), false, &mut keys, false);
        dense_gemm(t, d, a, x0, false, layer.w_v.value.data(), false, &mut vals, false);
        Ok(Self {
            len: t,
            pending: x0[idx.chunks * idx.chunk_size * d..].to_vec(),
            chunks: encode_chunks(&chunks, &idx, &layer.enc_c.value),
            keys,
            vals,
        })
    }

    /// Tokens seen so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.rows
    }

    /// Bytes held by the cache buffers.
    pub fn bytes(&self) -> usize {
        (self.pending.capacity() + self.chunks.data.capacity() + self.keys.capacity() + self.vals.capacity())
            * std::mem::size_of::<S>()
    }
}

/// Parameter count of one augmentation site.
pub fn param_count(cfg: &ResonaConfig, d_model: usize, query_width: usize) -> usize {
    let a = cfg.heads * cfg.head_dim;
    let gate = match cfg.alpha_mode {
        AlphaMode::Fixed => 0,
        AlphaMode::Gated => d_model + 1,
    };
    d_model * cfg.enc_width + query_width * cfg.enc_width + query_width * a + 2 * d_model * a + a * d_model + gate
}

#[cfg(test)]
mod tests;
