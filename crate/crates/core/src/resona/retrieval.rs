//! Chunk-and-search: chunking of the embedding sequence, unit-norm chunk and
//! query encodings, causal top-k cosine search and the resulting mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

/// Which chunks a query position may retrieve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eligibility {
    /// Chunk `c` is eligible for position `j` iff `(c+1)·U ≤ j`.
    #[default]
    Causal,
    /// Every complete chunk, for analysis only.
    All,
    /// Deliberately broken rule `c·U ≤ j`; lets test suites check that
    /// leakage is detected.
    #[doc(hidden)]
    OffByOneChunk,
}

impl Eligibility {
    #[inline]
    pub fn allows(self, chunk: usize, u: usize, j: usize) -> bool {
        match self {
            Eligibility::Causal => (chunk + 1) * u <= j,
            Eligibility::All => true,
            Eligibility::OffByOneChunk => chunk * u <= j,
        }
    }

    /// Number of chunks (a prefix of `0..n`) eligible for position `j`.
    #[inline]
    pub fn eligible_count(self, n: usize, u: usize, j: usize) -> usize {
        match self {
            Eligibility::Causal => (j / u).min(n),
            Eligibility::All => n,
            Eligibility::OffByOneChunk => (j / u + 1).min(n),
        }
    }
}

/// Complete chunks of a length-`T` sequence; chunk `c` covers
/// `[c·U, (c+1)·U)`. A trailing partial chunk is never retrievable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkIndexing {
    pub len: usize,
    pub chunk_size: usize,
    pub chunks: usize,
}

impl ChunkIndexing {
    pub fn new(len: usize, chunk_size: usize) -> Result<Self> {
        if chunk_size == 0 {
            return Err(Error::Config("chunk size must be at least 1".into()));
        }
        Ok(Self {
            len,
            chunk_size,
            chunks: len / chunk_size,
        })
    }

    pub fn span(&self, c: usize) -> std::ops::Range<usize> {
        c * self.chunk_size..(c + 1) * self.chunk_size
    }
}

/// Row-major collection of unit-norm embedding rows (possibly zero rows).
#[derive(Clone, Debug, PartialEq)]
pub struct UnitRows<S: Scalar> {
    pub rows: usize,
    pub width: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> UnitRows<S> {
    pub fn empty(width: usize) -> Self {
        Self {
            rows: 0,
            width,
            data: Vec::new(),
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn push(&mut self, row: &[S]) {
        assert_eq!(row.len(), self.width);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }
}

pub const NORM_FLOOR: f64 = 1e-12;

/// `normalize(x · W)` for one row, with `W: [in, E]`. Plain loops keep the
/// result independent of how many rows are encoded together.
pub fn encode_row<S: Scalar>(x: &[S], w: &Tensor<S>) -> Vec<S> {
    let (din, e) = w.dims2();
    debug_assert_eq!(x.len(), din);
    let mut out = vec![S::zero(); e];
    for (xi, wrow) in x.iter().zip(w.data().chunks(e)) {
        for (o, wv) in out.iter_mut().zip(wrow) {
            *o += *xi * *wv;
        }
    }
    let norm = out.iter().map(|v| *v * *v).sum::<S>().sqrt().max(lit(NORM_FLOOR));
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

/// Mean direction of the `U` rows of one chunk: each row is scaled to
/// unit norm before averaging, so tokens whose embeddings grow during
/// training do not dominate the chunk summary.
pub fn chunk_mean<S: Scalar>(rows: &[S], d: usize) -> Vec<S> {
    let u = rows.len() / d;
    let mut m = vec![S::zero(); d];
    for r in rows.chunks(d) {
        let n = r.iter().map(|v| *v * *v).sum::<S>().sqrt().max(lit(NORM_FLOOR));
        m.iter_mut().zip(r).for_each(|(a, b)| *a += *b / n);
    }
    let inv = S::one() / lit::<S>(u as f64);
    m.iter_mut().for_each(|v| *v *= inv);
    m
}

/// Splits `x0: [T, D]` into its complete chunks `X': [N, U, D]` (flattened).
pub fn chunk_context<S: Scalar>(x0: &[S], d: usize, chunk_size: usize) -> Result<(ChunkIndexing, Vec<S>)> {
    let t = x0.len() / d;
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    let idx = ChunkIndexing::new(t, chunk_size)?;
    Ok((idx, x0[..idx.chunks * chunk_size * d].to_vec()))
}

/// `C̄_c = normalize(mean(chunk c) · 𝒞)` for every chunk of `X'`.
pub fn encode_chunks<S: Scalar>(chunks: &[S], idx: &ChunkIndexing, enc: &Tensor<S>) -> UnitRows<S> {
    let (d, e) = enc.dims2();
    let stride = idx.chunk_size * d;
    let mut out = UnitRows::empty(e);
    for c in 0..idx.chunks {
        out.push(&encode_row(&chunk_mean(&chunks[c * stride..(c + 1) * stride], d), enc));
    }
    out
}

/// `Q̄_j = normalize(H_j · 𝒬)` for every row of `h: [T, H]`.
pub fn encode_queries<S: Scalar>(h: &[S], enc: &Tensor<S>) -> UnitRows<S> {
    let (din, e) = enc.dims2();
    let mut out = UnitRows::empty(e);
    for row in h.chunks(din) {
        out.push(&encode_row(row, enc));
    }
    out
}

/// Top-`k` chunks by cosine among the `eligible` prefix, highest first;
/// equal scores prefer the lower chunk index.
pub fn topk_row<S: Scalar>(q: &[S], chunks: &UnitRows<S>, eligible: usize, k: usize) -> Vec<usize> {
    let k = k.min(eligible);
    if k == 0 {
        return Vec::new();
    }
    let mut best: Vec<(S, usize)> = Vec::with_capacity(k + 1);
    for c in 0..eligible {
        let s: S = q.iter().zip(chunks.row(c)).map(|(a, b)| *a * *b).sum();
        // Strictly-greater insertion keeps earlier (lower-index) chunks ahead
        // of later ones with the same score.
        if best.len() == k && s <= best[k - 1].0 {
            continue;
        }
        let pos = best.iter().position(|(bs, _)| s > *bs).unwrap_or(best.len());
        best.insert(pos, (s, c));
        best.truncate(k);
    }
    best.into_iter().map(|(_, c)| c).collect()
}

/// Retrieved chunk sets `I_j` for every position.
pub fn topk_retrieve<S: Scalar>(
    queries: &UnitRows<S>,
    chunks: &UnitRows<S>,
    k: usize,
    idx: &ChunkIndexing,
    rule: Eligibility,
) -> Vec<Vec<usize>> {
    (0..queries.rows)
        .map(|j| {
            let n = rule.eligible_count(idx.chunks, idx.chunk_size, j);
            topk_row(queries.row(j), chunks, n, k)
        })
        .collect()
}

/// Binary retrieval mask stored as per-row chunk sets, sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalMask {
    pub len: usize,
    pub chunk_size: usize,
    pub sets: Vec<Vec<usize>>,
}

impl RetrievalMask {
    /// Token positions row `j` attends to, ascending.
    pub fn positions(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        let u = self.chunk_size;
        self.sets[j].iter().flat_map(move |&c| c * u..(c + 1) * u)
    }

    pub fn row_count(&self, j: usize) -> usize {
        self.sets[j].len() * self.chunk_size
    }

    pub fn dense<S: Scalar>(&self) -> Result<Tensor<S>> {
        let t = self.len;
        let mut m = Tensor::zeros([t, t])?;
        for j in 0..t {
            for i in self.positions(j) {
                m.data_mut()[j * t + i] = S::one();
            }
        }
        Ok(m)
    }

    /// Maximal runs of consecutive ones in row `j` as `[start, end)` spans.
    pub fn runs(&self, j: usize) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for i in self.positions(j) {
            match out.last_mut() {
                Some((_, e)) if *e == i => *e += 1,
                _ => out.push((i, i + 1)),
            }
        }
        out
    }

    /// Structural check: at most `k·U` ones in at most `k` runs, every
    /// column strictly before its row.
    pub fn validate(&self, k: usize) -> Result<()> {
        for j in 0..self.len {
            let bad = |what: String| Err(Error::Invariant(format!("mask row {j}: {what}")));
            if self.row_count(j) > k * self.chunk_size {
                return bad(format!("{} ones exceed k·U = {}", self.row_count(j), k * self.chunk_size));
            }
            let runs = self.runs(j);
            if runs.len() > k {
                return bad(format!("{} runs exceed k = {k}", runs.len()));
            }
            if let Some(&(_, end)) = runs.last() {
                if end > j {
                    return bad(format!("column {} is not before the row", end - 1));
                }
            }
        }
        Ok(())
    }
}

/// Materialises `{I_j}` as a mask, rejecting chunks not allowed by `rule`.
pub fn build_mask(sets: Vec<Vec<usize>>, idx: &ChunkIndexing, rule: Eligibility) -> Result<RetrievalMask> {
    if sets.len() != idx.len {
        return Err(Error::Invariant(format!(
            "{} retrieval rows for a length-{} sequence",
            sets.len(),
            idx.len
        )));
    }
    let mut sets = sets;
    for (j, set) in sets.iter_mut().enumerate() {
        set.sort_unstable();
        set.dedup();
        if let Some(&c) = set.iter().find(|&&c| c >= idx.chunks || !rule.allows(c, idx.chunk_size, j)) {
            return Err(Error::Invariant(format!("chunk {c} is not eligible for position {j}")));
        }
    }
    Ok(RetrievalMask {
        len: idx.len,
        chunk_size: idx.chunk_size,
        sets,
    })
}
