//! Multi-head cross-attention restricted to retrieved spans.

use std::rc::Rc;

use super::retrieval::RetrievalMask;
use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Seq, Tape, Tensor, Var};

/// Head layout of the attention width `A = heads · head_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub heads: usize,
    pub head_dim: usize,
}

impl Heads {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn scale<S: Scalar>(&self) -> S {
        S::one() / lit::<S>(self.head_dim as f64).sqrt()
    }
}

/// One query row against gathered key/value rows. `keys(i)` and `vals(i)`
/// return full-width rows for the `i`-th attended position. Writes the
/// concatenated head outputs to `out` (left at zero when `n == 0`) and the
/// per-head probabilities to `probs` (`[heads, n]`).
pub fn attend_row<'a, S: Scalar>(
    q: &[S],
    n: usize,
    keys: impl Fn(usize) -> &'a [S],
    vals: impl Fn(usize) -> &'a [S],
    heads: Heads,
    out: &mut [S],
    probs: &mut Vec<S>,
) {
    probs.clear();
    out.iter_mut().for_each(|v| *v = S::zero());
    if n == 0 {
        return;
    }
    let scale = heads.scale::<S>();
    let dk = heads.head_dim;
    for h in 0..heads.heads {
        let hs = h * dk..(h + 1) * dk;
        let start = probs.len();
        let mut max = S::neg_infinity();
        for i in 0..n {
            let s: S = q[hs.clone()].iter().zip(&keys(i)[hs.clone()]).map(|(a, b)| *a * *b).sum::<S>() * scale;
            max = max.max(s);
            probs.push(s);
        }
        let mut z = S::zero();
        for p in &mut probs[start..] {
            *p = (*p - max).exp();
            z += *p;
        }
        let inv = S::one() / z;
        for (i, p) in probs[start..].iter_mut().enumerate() {
            *p *= inv;
            for (o, v) in out[hs.clone()].iter_mut().zip(&vals(i)[hs.clone()]) {
                *o += *p * *v;
            }
        }
    }
}

impl<S: Scalar> Tape<S> {
    /// Gathered sparse attention. `q`, `k`, `v` are `[batch·T, A]`; row `j`
    /// of sequence `b` attends only to the positions selected by
    /// `masks[b]`. Rows with nothing selected are zero.
    pub fn span_attention(
        &self,
        q: &Var<S>,
        k: &Var<S>,
        v: &Var<S>,
        seq: Seq,
        masks: Rc<Vec<RetrievalMask>>,
        heads: Heads,
    ) -> Result<Var<S>> {
        let a = heads.width();
        for x in [q, k, v] {
            if x.shape() != [seq.rows(), a] {
                return Err(Error::Shape {
                    op: "span_attention",
                    lhs: x.shape().to_vec(),
                    rhs: vec![seq.rows(), a],
                });
            }
        }
        if masks.len() != seq.batch || masks.iter().any(|m| m.len != seq.len) {
            return Err(Error::Invariant("one retrieval mask per sequence is required".into()));
        }
        let t = seq.len;
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut out = vec![S::zero(); seq.rows() * a];
        let mut probs = Vec::new();
        let mut pos = Vec::new();
        for (b, mask) in masks.iter().enumerate() {
            for j in 0..t {
                let r = b * t + j;
                pos.clear();
                pos.extend(mask.positions(j).map(|i| b * t + i));
                attend_row(
                    &qd[r * a..(r + 1) * a],
                    pos.len(),
                    |i| &kd[pos[i] * a..(pos[i] + 1) * a],
                    |i| &vd[pos[i] * a..(pos[i] + 1) * a],
                    heads,
                    &mut out[r * a..(r + 1) * a],
                    &mut probs,
                );
            }
        }
        if !self.will_record(&[q, k, v]) {
            return Ok(self.constant(Tensor::from_parts(vec![seq.rows(), a], out)));
        }
        let (qv, kv, vv) = (q.rc(), k.rc(), v.rc());
        let (qn, kn, vn) = (q.node(), k.node(), v.node());
        Ok(self.record(Tensor::from_parts(vec![seq.rows(), a], out), &[q, k, v], move |g, sink| {
            let rows = seq.rows();
            let mut dq = vec![S::zero(); rows * a];
            let mut dk = vec![S::zero(); rows * a];
            let mut dv = vec![S::zero(); rows * a];
            let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
            let scale = heads.scale::<S>();
            let dh = heads.head_dim;
            let mut probs = Vec::new();
            let mut scratch = vec![S::zero(); a];
            let mut pos = Vec::new();
            let mut dp = Vec::new();
            for (b, mask) in masks.iter().enumerate() {
                for j in 0..t {
                    let r = b * t + j;
                    pos.clear();
                    pos.extend(mask.positions(j).map(|i| b * t + i));
                    let n = pos.len();
                    if n == 0 {
                        continue;
                    }
                    attend_row(
                        &qd[r * a..(r + 1) * a],
                        n,
                        |i| &kd[pos[i] * a..(pos[i] + 1) * a],
                        |i| &vd[pos[i] * a..(pos[i] + 1) * a],
                        heads,
                        &mut scratch,
                        &mut probs,
                    );
                    let go = &g[r * a..(r + 1) * a];
                    for h in 0..heads.heads {
                        let hs = h * dh..(h + 1) * dh;
                        let p = &probs[h * n..(h + 1) * n];
                        dp.clear();
                        for &pi in pos.iter() {
                            dp.push(go[hs.clone()].iter().zip(&vd[pi * a + h * dh..]).map(|(x, y)| *x * *y).sum::<S>());
                        }
                        let mean: S = p.iter().zip(&dp).map(|(x, y)| *x * *y).sum();
                        for (i, &pi) in pos.iter().enumerate() {
                            let ds = p[i] * (dp[i] - mean) * scale;
                            let base = pi * a + h * dh;
                            for c in 0..dh {
                                dv[base + c] += p[i] * go[h * dh + c];
                                dq[r * a + h * dh + c] += ds * kd[base + c];
                                dk[base + c] += ds * qd[r * a + h * dh + c];
                            }
                        }
                    }
                }
            }
            sink.add(qn, &dq);
            sink.add(kn, &dk);
            sink.add(vn, &dv);
        }))
    }
}

/// Dense reference: full `T×T` masked softmax per head. Used by tests and
/// the verification suites.
pub fn dense_masked_attention<S: Scalar>(
    tape: &Tape<S>,
    q: &Var<S>,
    k: &Var<S>,
    v: &Var<S>,
    mask: &Tensor<S>,
    heads: Heads,
) -> Result<Var<S>> {
    let (t, a) = q.value().dims2();
    let dk = heads.head_dim;
    let mut outs = Vec::new();
    for h in 0..heads.heads {
        let sel = Tensor::from_fn([a, dk], |i| if i / dk == h * dk + i % dk { S::one() } else { S::zero() })?;
        let sel = tape.constant(sel);
        let (qh, kh, vh) = (tape.matmul(q, &sel)?, tape.matmul(k, &sel)?, tape.matmul(v, &sel)?);
        let scores = tape.scale(&tape.matmul_nt(&qh, &kh)?, heads.scale());
        let p = tape.masked_softmax(&scores, mask)?;
        let oh = tape.matmul(&p, &vh)?;
        // scatter back into the head's columns
        let back = Tensor::from_fn([dk, a], |i| if i % a == h * dk + i / a { S::one() } else { S::zero() })?;
        outs.push(tape.matmul(&oh, &tape.constant(back))?);
    }
    let mut acc = outs[0].clone();
    for o in &outs[1..] {
        acc = tape.add(&acc, o)?;
    }
    debug_assert_eq!(acc.shape(), [t, a]);
    Ok(acc)
}
