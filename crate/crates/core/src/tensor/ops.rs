//! Differentiable primitives. Each op computes its forward value and,
//! when recording, a closure that maps the output gradient onto its
//! inputs.

use std::rc::Rc;

use super::{lit, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Row layout of a batch of sequences flattened to `batch * len` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seq {
    pub batch: usize,
    pub len: usize,
}

impl Seq {
    pub fn new(batch: usize, len: usize) -> Self {
        Self { batch, len }
    }

    pub fn single(len: usize) -> Self {
        Self { batch: 1, len }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
}

/// `c (+)= op(a) · op(b)` on row-major slices, where `op` optionally
/// transposes. `a` is `[m,k]` (or `[k,m]` when `trans_a`), `b` is `[k,n]`
/// (or `[n,k]` when `trans_b`), `c` is `[m,n]`.
#[allow(clippy::too_many_arguments)]
pub fn dense_gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    trans_a: bool,
    b: &[S],
    trans_b: bool,
    c: &mut [S],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { S::one() } else { S::zero() };
    // SAFETY: extents were checked against slice lengths above.
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Triple-loop reference product, kept independent of the gemm path.
pub fn naive_matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if a.rank() != 2 || b.rank() != 2 || k != k2 {
        return Err(Error::Shape {
            op: "naive_matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = S::zero();
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

fn same_shape<S: Scalar>(op: &'static str, a: &Var<S>, b: &Var<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn rank2<S: Scalar>(op: &'static str, a: &Var<S>) -> Result<(usize, usize)> {
    match a.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("{op} expects a rank-2 tensor"),
        }),
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Scalar> Tape<S> {
    /// Matrix product `[m,k]·[k,n]`, or batched `[b,m,k]·[b,n,k]` over an
    /// explicit leading extent.
    pub fn matmul(&self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        a.value().check_finite("matmul")?;
        b.value().check_finite("matmul")?;
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let (batch, m, k, n, out_shape) = match (a.shape(), b.shape()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, vec![*m, *n]),
            ([bt, m, k], [bt2, k2, n]) if k == k2 && bt == bt2 => {
                (*bt, *m, *k, *n, vec![*bt, *m, *n])
            }
            _ => return Err(mismatch()),
        };
        let mut out = vec![S::zero(); batch * m * n];
        for p in 0..batch {
            dense_gemm(
                m,
                k,
                n,
                &a.data()[p * m * k..],
                false,
                &b.data()[p * k * n..],
                false,
                &mut out[p * m * n..],
                false,
            );
        }
        let (av, bv) = (a.rc(), b.rc());
        let (an, bn) = (a.node(), b.node());
        Ok(self.record(Tensor::from_parts(out_shape, out), &[a, b], move |g, sink| {
            for p in 0..batch {
                let gp = &g[p * m * n..(p + 1) * m * n];
                // dA = dC · Bᵀ
                sink.with(an, |da| {
                    dense_gemm(m, n, k, gp, false, &bv.data()[p * k * n..], true, &mut da[p * m * k..], true)
                });
                // dB = Aᵀ · dC
                sink.with(bn, |db| {
                    dense_gemm(k, m, n, &av.data()[p * m * k..], true, gp, false, &mut db[p * k * n..], true)
                });
            }
        }))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        a.value().check_finite("matmul_nt")?;
        b.value().check_finite("matmul_nt")?;
        let (m, k) = rank2("matmul_nt", a)?;
        let (n, k2) = rank2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        dense_gemm(m, k, n, a.data(), false, b.data(), true, &mut out, false);
        let (av, bv) = (a.rc(), b.rc());
        let (an, bn) = (a.node(), b.node());
        Ok(self.record(Tensor::from_parts(vec![m, n], out), &[a, b], move |g, sink| {
            sink.with(an, |da| dense_gemm(m, n, k, g, false, bv.data(), false, da, true));
            sink.with(bn, |db| dense_gemm(n, m, k, g, true, av.data(), false, db, true));
        }))
    }

    pub fn add(&self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        same_shape("add", a, b)?;
        let out: Vec<S> = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
        let (an, bn) = (a.node(), b.node());
        Ok(self.record(Tensor::from_parts(a.shape().to_vec(), out), &[a, b], move |g, sink| {
            sink.add(an, g);
            sink.add(bn, g);
        }))
    }

    pub fn sub(&self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        same_shape("sub", a, b)?;
        let out: Vec<S> = a.data().iter().zip(b.data()).map(|(x, y)| *x - *y).collect();
        let (an, bn) = (a.node(), b.node());
        Ok(self.record(Tensor::from_parts(a.shape().to_vec(), out), &[a, b], move |g, sink| {
            sink.add(an, g);
            sink.with(bn, |db| db.iter_mut().zip(g).for_each(|(d, v)| *d -= *v));
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        same_shape("mul", a, b)?;
        let out: Vec<S> = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
        let (av, bv) = (a.rc(), b.rc());
        let (an, bn) = (a.node(), b.node());
        Ok(self.record(Tensor::from_parts(a.shape().to_vec(), out), &[a, b], move |g, sink| {
            sink.with(an, |da| {
                for ((d, gv), y) in da.iter_mut().zip(g).zip(bv.data()) {
                    *d += *gv * *y;
                }
            });
            sink.with(bn, |db| {
                for ((d, gv), x) in db.iter_mut().zip(g).zip(av.data()) {
                    *d += *gv * *x;
                }
            });
        }))
    }

    pub fn scale(&self, a: &Var<S>, c: S) -> Var<S> {
        self.affine(a, c, S::zero())
    }

    /// `c1 * a + c0` elementwise.
    pub fn affine(&self, a: &Var<S>, c1: S, c0: S) -> Var<S> {
        let out: Vec<S> = a.data().iter().map(|x| c1 * *x + c0).collect();
        let an = a.node();
        self.record(Tensor::from_parts(a.shape().to_vec(), out), &[a], move |g, sink| {
            sink.with(an, |da| da.iter_mut().zip(g).for_each(|(d, v)| *d += c1 * *v));
        })
    }

    /// Adds `bias: [n]` to every row of `a: [m,n]`.
    pub fn add_row(&self, a: &Var<S>, bias: &Var<S>) -> Result<Var<S>> {
        let (m, n) = rank2("add_row", a)?;
        if bias.shape() != [n] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: a.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bias.data()).for_each(|(x, b)| *x += *b);
        }
        let (an, bn) = (a.node(), bias.node());
        Ok(self.record(Tensor::from_parts(vec![m, n], out), &[a, bias], move |g, sink| {
            sink.add(an, g);
            sink.with(bn, |db| {
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += *v);
                }
            });
        }))
    }

    /// Multiplies row `i` of `a: [m,n]` by `s[i]`, with `s: [m]` or `[m,1]`.
    pub fn scale_rows(&self, a: &Var<S>, s: &Var<S>) -> Result<Var<S>> {
        let (m, n) = rank2("scale_rows", a)?;
        if s.value().len() != m || !matches!(s.shape(), [_] | [_, 1]) {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: a.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let mut out = a.data().to_vec();
        for (row, sv) in out.chunks_mut(n).zip(s.data()) {
            row.iter_mut().for_each(|x| *x *= *sv);
        }
        let (av, sv) = (a.rc(), s.rc());
        let (an, sn) = (a.node(), s.node());
        Ok(self.record(Tensor::from_parts(vec![m, n], out), &[a, s], move |g, sink| {
            sink.with(an, |da| {
                for ((drow, grow), r) in da.chunks_mut(n).zip(g.chunks(n)).zip(sv.data()) {
                    drow.iter_mut().zip(grow).for_each(|(d, v)| *d += *v * *r);
                }
            });
            sink.with(sn, |ds| {
                for ((d, grow), arow) in ds.iter_mut().zip(g.chunks(n)).zip(av.data().chunks(n)) {
                    *d += grow.iter().zip(arow).map(|(x, y)| *x * *y).sum::<S>();
                }
            });
        }))
    }

    pub fn sigmoid(&self, a: &Var<S>) -> Var<S> {
        let out: Vec<S> = a.data().iter().map(|x| sigmoid(*x)).collect();
        let an = a.node();
        let y = Rc::new(out.clone());
        self.record(Tensor::from_parts(a.shape().to_vec(), out), &[a], move |g, sink| {
            sink.with(an, |da| {
                for ((d, gv), s) in da.iter_mut().zip(g).zip(y.iter()) {
                    *d += *gv * *s * (S::one() - *s);
                }
            });
        })
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self, a: &Var<S>) -> Var<S> {
        let out: Vec<S> = a.data().iter().map(|x| *x * sigmoid(*x)).collect();
        let av = a.rc();
        let an = a.node();
        self.record(Tensor::from_parts(a.shape().to_vec(), out), &[a], move |g, sink| {
            sink.with(an, |da| {
                for ((d, gv), x) in da.iter_mut().zip(g).zip(av.data()) {
                    let s = sigmoid(*x);
                    *d += *gv * s * (S::one() + *x * (S::one() - s));
                }
            });
        })
    }

    pub fn sum(&self, a: &Var<S>) -> Var<S> {
        let total: S = a.data().iter().copied().sum();
        let an = a.node();
        let n = a.value().len();
        self.record(Tensor::scalar(total), &[a], move |g, sink| {
            let g0 = g[0];
            sink.with(an, |da| da.iter_mut().take(n).for_each(|d| *d += g0));
        })
    }

    pub fn mean(&self, a: &Var<S>) -> Var<S> {
        let n = a.value().len();
        let s = self.sum(a);
        self.scale(&s, S::one() / lit::<S>(n as f64))
    }

    /// Sum of `a ⊙ w` for a fixed weight tensor; turns any output into a
    /// scalar probe for gradient checks.
    pub fn dot_const(&self, a: &Var<S>, w: &Tensor<S>) -> Result<Var<S>> {
        if a.shape() != w.shape() {
            return Err(Error::Shape {
                op: "dot_const",
                lhs: a.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let total: S = a.data().iter().zip(w.data()).map(|(x, y)| *x * *y).sum();
        let wv = Rc::new(w.data().to_vec());
        let an = a.node();
        Ok(self.record(Tensor::scalar(total), &[a], move |g, sink| {
            let g0 = g[0];
            sink.with(an, |da| da.iter_mut().zip(wv.iter()).for_each(|(d, w)| *d += g0 * *w));
        }))
    }

    /// Root-mean-square normalisation of each row with a learned gain.
    pub fn rmsnorm(&self, x: &Var<S>, gain: &Var<S>, eps: f64) -> Result<Var<S>> {
        let (m, n) = rank2("rmsnorm", x)?;
        if gain.shape() != [n] {
            return Err(Error::Shape {
                op: "rmsnorm",
                lhs: x.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let eps = lit::<S>(eps);
        let inv_n = S::one() / lit::<S>(n as f64);
        let mut inv_rms = Vec::with_capacity(m);
        let mut out = vec![S::zero(); m * n];
        for (row, orow) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            let ms = row.iter().map(|v| *v * *v).sum::<S>() * inv_n;
            let r = S::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            for ((o, v), g) in orow.iter_mut().zip(row).zip(gain.data()) {
                *o = *v * r * *g;
            }
        }
        let (xv, gv) = (x.rc(), gain.rc());
        let (xn, gn) = (x.node(), gain.node());
        Ok(self.record(Tensor::from_parts(vec![m, n], out), &[x, gain], move |g, sink| {
            sink.with(gn, |dg| {
                for ((grow, xrow), r) in g.chunks(n).zip(xv.data().chunks(n)).zip(&inv_rms) {
                    for ((d, gv), xv) in dg.iter_mut().zip(grow).zip(xrow) {
                        *d += *gv * *xv * *r;
                    }
                }
            });
            sink.with(xn, |dx| {
                for (((drow, grow), xrow), r) in dx
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(xv.data().chunks(n))
                    .zip(&inv_rms)
                {
                    // d xhat = g * gain; dx = r * (dxh - xhat * mean(dxh * xhat))
                    let mut dot = S::zero();
                    for ((gv, gain), xv) in grow.iter().zip(gv.data()).zip(xrow) {
                        dot += *gv * *gain * *xv * *r;
                    }
                    let c = dot * inv_n;
                    for (((d, gv), gain), xv) in drow.iter_mut().zip(grow).zip(gv.data()).zip(xrow) {
                        let xh = *xv * *r;
                        *d += *r * (*gv * *gain - xh * c);
                    }
                }
            });
        }))
    }

    /// Gathers rows of `table: [V,D]` for the given ids.
    pub fn embed(&self, ids: &[usize], table: &Var<S>) -> Result<Var<S>> {
        let (v, d) = rank2("embed", table)?;
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "token id",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        let ids = ids.to_vec();
        let tn = table.node();
        Ok(self.record(Tensor::from_parts(vec![ids.len(), d], out), &[table], move |g, sink| {
            sink.with(tn, |dt| {
                for (row, &id) in g.chunks(d).zip(&ids) {
                    dt[id * d..(id + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                }
            });
        }))
    }

    /// Mean negative log-likelihood over rows with `loss_mask = 1`.
    pub fn cross_entropy(
        &self,
        logits: &Var<S>,
        targets: &[usize],
        loss_mask: &[u8],
    ) -> Result<Var<S>> {
        let (m, v) = rank2("cross_entropy", logits)?;
        if targets.len() != m || loss_mask.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len(), loss_mask.len()],
            });
        }
        let count = loss_mask.iter().filter(|&&b| b == 1).count();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        if let Some(&b) = loss_mask.iter().find(|&&b| b > 1) {
            return Err(Error::NonBinaryMask(b.to_string()));
        }
        logits.value().check_finite("cross_entropy")?;
        let inv = S::one() / lit::<S>(count as f64);
        let mut total = S::zero();
        let mut probs: Vec<(usize, Vec<S>)> = Vec::with_capacity(count);
        let keep = self.will_record(&[logits]);
        for (i, row) in logits.data().chunks(v).enumerate() {
            if loss_mask[i] == 0 {
                continue;
            }
            let t = targets[i];
            if t >= v {
                return Err(Error::Index {
                    what: "target",
                    index: t,
                    bound: v,
                });
            }
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|x| (*x - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[t];
            if keep {
                probs.push((i, row.iter().map(|x| (*x - lse).exp()).collect()));
            }
        }
        let targets = targets.to_vec();
        let ln = logits.node();
        Ok(self.record(Tensor::scalar(total * inv), &[logits], move |g, sink| {
            let scale = g[0] * inv;
            sink.with(ln, |dl| {
                for (i, p) in &probs {
                    let row = &mut dl[i * v..(i + 1) * v];
                    for (d, pv) in row.iter_mut().zip(p) {
                        *d += scale * *pv;
                    }
                    row[targets[*i]] -= scale;
                }
            });
        }))
    }

    /// Row-wise softmax over entries with `mask = 1`; masked entries get
    /// zero probability and a row with no unmasked entry is all zeros.
    pub fn masked_softmax(&self, logits: &Var<S>, mask: &Tensor<S>) -> Result<Var<S>> {
        if logits.shape() != mask.shape() {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: logits.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        if let Some(bad) = mask.data().iter().find(|v| **v != S::zero() && **v != S::one()) {
            return Err(Error::NonBinaryMask(bad.to_string()));
        }
        let (_, n) = logits.value().dims2();
        let out = masked_softmax_rows(logits.data(), mask.data(), n);
        let y = Rc::new(out.clone());
        let ln = logits.node();
        Ok(self.record(Tensor::from_parts(logits.shape().to_vec(), out), &[logits], move |g, sink| {
            sink.with(ln, |dl| {
                for ((drow, grow), prow) in dl.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: S = grow.iter().zip(prow).map(|(a, b)| *a * *b).sum();
                    for ((d, gv), p) in drow.iter_mut().zip(grow).zip(prow) {
                        *d += *p * (*gv - dot);
                    }
                }
            });
        }))
    }

    /// Diagonal gated scan `h_t = a_t ⊙ h_{t-1} + (1 - a_t) ⊙ u_t` over each
    /// sequence of the batch. `a` and `u` are `[rows, H]`; `h0` is `[H]` or
    /// `[batch, H]` (zeros when absent) and receives no gradient.
    pub fn gated_scan(
        &self,
        a: &Var<S>,
        u: &Var<S>,
        seq: Seq,
        h0: Option<&Tensor<S>>,
    ) -> Result<Var<S>> {
        same_shape("gated_scan", a, u)?;
        let (rows, h) = rank2("gated_scan", a)?;
        if rows != seq.rows() || seq.len == 0 {
            return Err(Error::Shape {
                op: "gated_scan",
                lhs: a.shape().to_vec(),
                rhs: vec![seq.batch, seq.len],
            });
        }
        let init = initial_rows(h0, seq.batch, h, "gated_scan h0")?;
        let mut out = vec![S::zero(); rows * h];
        let (ad, ud) = (a.data(), u.data());
        for b in 0..seq.batch {
            let mut prev: Vec<S> = init[b * h..(b + 1) * h].to_vec();
            for t in 0..seq.len {
                let r = (b * seq.len + t) * h;
                for c in 0..h {
                    let at = ad[r + c];
                    let v = at * prev[c] + (S::one() - at) * ud[r + c];
                    out[r + c] = v;
                    prev[c] = v;
                }
            }
        }
        let (av, uv) = (a.rc(), u.rc());
        let (an, un) = (a.node(), u.node());
        let hs = Rc::new(out.clone());
        Ok(self.record(Tensor::from_parts(vec![rows, h], out), &[a, u], move |g, sink| {
            let mut da = vec![S::zero(); rows * h];
            let mut du = vec![S::zero(); rows * h];
            for b in 0..seq.batch {
                let mut carry = vec![S::zero(); h];
                for t in (0..seq.len).rev() {
                    let r = (b * seq.len + t) * h;
                    for c in 0..h {
                        let gt = g[r + c] + carry[c];
                        let at = av.data()[r + c];
                        let prev = if t == 0 { init[b * h + c] } else { hs[r - h + c] };
                        da[r + c] = gt * (prev - uv.data()[r + c]);
                        du[r + c] = gt * (S::one() - at);
                        carry[c] = gt * at;
                    }
                }
            }
            sink.add(an, &da);
            sink.add(un, &du);
        }))
    }

    /// Decayed outer-product state `S_t = γ S_{t-1} + v_t k_tᵀ` with readout
    /// `r_t = S_t q_t`, per sequence. `q,k,v` are `[rows, d]`. Also returns
    /// the final `[batch, d, d]` states (row-major, `S[i][j]` pairs `v_i`
    /// with `k_j`).
    pub fn linear_attention_scan(
        &self,
        q: &Var<S>,
        k: &Var<S>,
        v: &Var<S>,
        seq: Seq,
        gamma: f64,
        s0: Option<&Tensor<S>>,
    ) -> Result<(Var<S>, Vec<S>)> {
        same_shape("linear_attention_scan", q, k)?;
        same_shape("linear_attention_scan", q, v)?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {gamma}")));
        }
        let (rows, d) = rank2("linear_attention_scan", q)?;
        if rows != seq.rows() || seq.len == 0 {
            return Err(Error::Shape {
                op: "linear_attention_scan",
                lhs: q.shape().to_vec(),
                rhs: vec![seq.batch, seq.len],
            });
        }
        let dd = d * d;
        let init: Vec<S> = match s0 {
            None => vec![S::zero(); seq.batch * dd],
            Some(t) if t.len() == dd => t.data().repeat(seq.batch),
            Some(t) if t.len() == seq.batch * dd => t.data().to_vec(),
            Some(t) => {
                return Err(Error::Shape {
                    op: "linear_attention_scan s0",
                    lhs: t.shape().to_vec(),
                    rhs: vec![d, d],
                })
            }
        };
        let gm = lit::<S>(gamma);
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut out = vec![S::zero(); rows * d];
        let mut finals = Vec::with_capacity(seq.batch * dd);
        for b in 0..seq.batch {
            let mut state = init[b * dd..(b + 1) * dd].to_vec();
            for t in 0..seq.len {
                let r = (b * seq.len + t) * d;
                linattn_step(&mut state, &qd[r..r + d], &kd[r..r + d], &vd[r..r + d], gm, &mut out[r..r + d]);
            }
            finals.extend_from_slice(&state);
        }
        let (qv, kv, vv) = (q.rc(), k.rc(), v.rc());
        let (qn, kn, vn) = (q.node(), k.node(), v.node());
        let var = self.record(Tensor::from_parts(vec![rows, d], out), &[q, k, v], move |g, sink| {
            let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
            let mut dq = vec![S::zero(); rows * d];
            let mut dk = vec![S::zero(); rows * d];
            let mut dv = vec![S::zero(); rows * d];
            let want_q = sink.wants(qn);
            for b in 0..seq.batch {
                // dq_t = S_tᵀ g_t, replaying the forward state.
                if want_q {
                    let mut state = init[b * dd..(b + 1) * dd].to_vec();
                    let mut scratch = vec![S::zero(); d];
                    for t in 0..seq.len {
                        let r = (b * seq.len + t) * d;
                        linattn_step(&mut state, &qd[r..r + d], &kd[r..r + d], &vd[r..r + d], gm, &mut scratch);
                        for i in 0..d {
                            let gi = g[r + i];
                            let srow = &state[i * d..(i + 1) * d];
                            for j in 0..d {
                                dq[r + j] += srow[j] * gi;
                            }
                        }
                    }
                }
                // G_t = γ G_{t+1} + g_t q_tᵀ; dv_t = G_t k_t; dk_t = G_tᵀ v_t.
                let mut acc = vec![S::zero(); dd];
                for t in (0..seq.len).rev() {
                    let r = (b * seq.len + t) * d;
                    for i in 0..d {
                        let gi = g[r + i];
                        let row = &mut acc[i * d..(i + 1) * d];
                        for j in 0..d {
                            row[j] = gm * row[j] + gi * qd[r + j];
                        }
                    }
                    for i in 0..d {
                        let row = &acc[i * d..(i + 1) * d];
                        let mut s = S::zero();
                        for j in 0..d {
                            s += row[j] * kd[r + j];
                            dk[r + j] += row[j] * vd[r + i];
                        }
                        dv[r + i] = s;
                    }
                }
            }
            sink.add(qn, &dq);
            sink.add(kn, &dk);
            sink.add(vn, &dv);
        });
        Ok((var, finals))
    }
}

fn initial_rows<S: Scalar>(
    h0: Option<&Tensor<S>>,
    batch: usize,
    h: usize,
    what: &'static str,
) -> Result<Vec<S>> {
    match h0 {
        None => Ok(vec![S::zero(); batch * h]),
        Some(t) if t.len() == h => Ok(t.data().repeat(batch)),
        Some(t) if t.len() == batch * h => Ok(t.data().to_vec()),
        Some(t) => Err(Error::Shape {
            op: what,
            lhs: t.shape().to_vec(),
            rhs: vec![batch, h],
        }),
    }
}

/// One linear-attention update; writes `S_t q_t` into `out`.
#[inline]
pub(crate) fn linattn_step<S: Scalar>(state: &mut [S], q: &[S], k: &[S], v: &[S], gamma: S, out: &mut [S]) {
    let d = q.len();
    for i in 0..d {
        let row = &mut state[i * d..(i + 1) * d];
        let vi = v[i];
        let mut acc = S::zero();
        for j in 0..d {
            let s = gamma * row[j] + vi * k[j];
            row[j] = s;
            acc += s * q[j];
        }
        out[i] = acc;
    }
}

/// Masked softmax on raw row-major data, shared with the dense attention
/// reference.
pub(crate) fn masked_softmax_rows<S: Scalar>(logits: &[S], mask: &[S], n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); logits.len()];
    for ((orow, lrow), mrow) in out.chunks_mut(n).zip(logits.chunks(n)).zip(mask.chunks(n)) {
        let mut mx = S::neg_infinity();
        for (l, m) in lrow.iter().zip(mrow) {
            if *m == S::one() && *l > mx {
                mx = *l;
            }
        }
        if mx == S::neg_infinity() {
            continue;
        }
        let mut z = S::zero();
        for ((o, l), m) in orow.iter_mut().zip(lrow).zip(mrow) {
            if *m == S::one() {
                *o = (*l - mx).exp();
                z += *o;
            }
        }
        orow.iter_mut().for_each(|o| *o /= z);
    }
    out
}

