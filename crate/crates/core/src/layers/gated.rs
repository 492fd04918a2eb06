use crate::error::{Error, Result};
use crate::params::{Binder, HasParams, Param, ParamGroup};
use crate::tensor::{dense_gemm, sigmoid, Prng, Scalar, Seq, Tensor, Var};

/// Diagonal gated recurrence:
///
/// ```text
/// a_t = sigmoid(W_a x_t + b_a)
/// h_t = a_t ⊙ h_{t-1} + (1 - a_t) ⊙ (W_x x_t)
/// y_t = W_o (h_t ⊙ silu(W_g x_t))
/// ```
#[derive(Clone, Debug)]
pub struct GatedRecurrence<S: Scalar> {
    pub w_a: Param<S>,
    pub b_a: Param<S>,
    pub w_x: Param<S>,
    pub w_g: Param<S>,
    pub w_o: Param<S>,
}

impl<S: Scalar> GatedRecurrence<S> {
    pub fn init(prefix: &str, d_model: usize, hidden: usize, rng: &Prng) -> Result<Self> {
        let g = ParamGroup::Base;
        // Retention biases spread over sigmoid^-1 of [0.5, 0.95] so the
        // channels start with a range of memory lengths.
        let bias = Tensor::from_fn([hidden], |i| {
            let r = if hidden == 1 {
                0.5
            } else {
                0.5 + 0.45 * i as f64 / (hidden - 1) as f64
            };
            S::from_f64_lossy((r / (1.0 - r)).ln())
        })?;
        Ok(Self {
            w_a: Param::normal(format!("{prefix}.w_a"), &[d_model, hidden], 0.02, rng, g)?,
            b_a: Param::new(format!("{prefix}.b_a"), bias, g, false),
            w_x: Param::normal(format!("{prefix}.w_x"), &[d_model, hidden], 0.02, rng, g)?,
            w_g: Param::normal(format!("{prefix}.w_g"), &[d_model, hidden], 0.02, rng, g)?,
            w_o: Param::zeros(format!("{prefix}.w_o"), &[hidden, d_model], g, true)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w_a.value.shape()[1]
    }

    pub fn d_model(&self) -> usize {
        self.w_a.value.shape()[0]
    }

    /// Returns `(Y, H_seq, final states [batch, H])`.
    pub fn forward(
        &self,
        b: &Binder<S>,
        x: &Var<S>,
        seq: Seq,
        h0: Option<&Tensor<S>>,
    ) -> Result<(Var<S>, Var<S>, Vec<S>)> {
        if seq.len == 0 || x.value().is_empty() {
            return Err(Error::EmptySequence);
        }
        let tape = b.tape();
        let a_pre = tape.matmul(x, &b.bind(&self.w_a))?;
        let a = tape.sigmoid(&tape.add_row(&a_pre, &b.bind(&self.b_a))?);
        let u = tape.matmul(x, &b.bind(&self.w_x))?;
        let gate = tape.silu(&tape.matmul(x, &b.bind(&self.w_g))?);
        let h_seq = tape.gated_scan(&a, &u, seq, h0)?;
        let mixed = tape.mul(&h_seq, &gate)?;
        let y = tape.matmul(&mixed, &b.bind(&self.w_o))?;
        let hdim = self.hidden();
        let finals = (0..seq.batch)
            .flat_map(|bi| {
                let r = (bi * seq.len + seq.len - 1) * hdim;
                h_seq.data()[r..r + hdim].to_vec()
            })
            .collect();
        Ok((y, h_seq, finals))
    }

    /// Single-token update; `state` is the `[H]` hidden vector. Returns
    /// `(y_t, h_t)`.
    pub fn step(&self, x: &[S], state: &mut [S]) -> (Vec<S>, Vec<S>) {
        let (d, h) = (self.d_model(), self.hidden());
        let mut a = vec![S::zero(); h];
        let mut u = vec![S::zero(); h];
        let mut g = vec![S::zero(); h];
        dense_gemm(1, d, h, x, false, self.w_a.value.data(), false, &mut a, false);
        dense_gemm(1, d, h, x, false, self.w_x.value.data(), false, &mut u, false);
        dense_gemm(1, d, h, x, false, self.w_g.value.data(), false, &mut g, false);
        let mut mixed = vec![S::zero(); h];
        for c in 0..h {
            let at = sigmoid(a[c] + self.b_a.value.data()[c]);
            state[c] = at * state[c] + (S::one() - at) * u[c];
            mixed[c] = state[c] * (g[c] * sigmoid(g[c]));
        }
        let mut y = vec![S::zero(); d];
        dense_gemm(1, h, d, &mixed, false, self.w_o.value.data(), false, &mut y, false);
        (y, state.to_vec())
    }
}

impl<S: Scalar> HasParams<S> for GatedRecurrence<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        for p in [&self.w_a, &self.b_a, &self.w_x, &self.w_g, &self.w_o] {
            f(p);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        for p in [&mut self.w_a, &mut self.b_a, &mut self.w_x, &mut self.w_g, &mut self.w_o] {
            f(p);
        }
    }
}
