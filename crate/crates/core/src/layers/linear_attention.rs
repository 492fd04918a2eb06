use crate::error::{Error, Result};
use crate::params::{Binder, HasParams, Param, ParamGroup};
use crate::tensor::{dense_gemm, linattn_step, lit, Prng, Scalar, Seq, Tensor, Var};

/// Decayed linear attention with a matrix-valued state:
/// `S_t = γ S_{t-1} + v_t k_tᵀ`, `y_t = W_o (S_t q_t)`.
#[derive(Clone, Debug)]
pub struct LinearAttention<S: Scalar> {
    pub w_q: Param<S>,
    pub w_k: Param<S>,
    pub w_v: Param<S>,
    pub w_o: Param<S>,
    pub decay: f64,
}

impl<S: Scalar> LinearAttention<S> {
    pub fn init(prefix: &str, d_model: usize, width: usize, decay: f64, rng: &Prng) -> Result<Self> {
        check_decay(decay)?;
        let g = ParamGroup::Base;
        Ok(Self {
            w_q: Param::normal(format!("{prefix}.w_q"), &[d_model, width], 0.02, rng, g)?,
            w_k: Param::normal(format!("{prefix}.w_k"), &[d_model, width], 0.02, rng, g)?,
            w_v: Param::normal(format!("{prefix}.w_v"), &[d_model, width], 0.02, rng, g)?,
            w_o: Param::zeros(format!("{prefix}.w_o"), &[width, d_model], g, true)?,
            decay,
        })
    }

    pub fn width(&self) -> usize {
        self.w_q.value.shape()[1]
    }

    pub fn d_model(&self) -> usize {
        self.w_q.value.shape()[0]
    }

    /// Returns `(Y, H_seq, final states [batch, d, d])`, where row `t` of
    /// `H_seq` is the readout `S_t q_t`.
    pub fn forward(
        &self,
        b: &Binder<S>,
        x: &Var<S>,
        seq: Seq,
        s0: Option<&Tensor<S>>,
    ) -> Result<(Var<S>, Var<S>, Vec<S>)> {
        check_decay(self.decay)?;
        if seq.len == 0 {
            return Err(Error::EmptySequence);
        }
        let tape = b.tape();
        let q = tape.matmul(x, &b.bind(&self.w_q))?;
        let k = tape.matmul(x, &b.bind(&self.w_k))?;
        let v = tape.matmul(x, &b.bind(&self.w_v))?;
        let (readout, finals) = tape.linear_attention_scan(&q, &k, &v, seq, self.decay, s0)?;
        let y = tape.matmul(&readout, &b.bind(&self.w_o))?;
        Ok((y, readout, finals))
    }

    /// Single-token update of the `[d, d]` state. Returns `(y_t, S_t q_t)`.
    pub fn step(&self, x: &[S], state: &mut [S]) -> (Vec<S>, Vec<S>) {
        let (dm, w) = (self.d_model(), self.width());
        let mut q = vec![S::zero(); w];
        let mut k = vec![S::zero(); w];
        let mut v = vec![S::zero(); w];
        dense_gemm(1, dm, w, x, false, self.w_q.value.data(), false, &mut q, false);
        dense_gemm(1, dm, w, x, false, self.w_k.value.data(), false, &mut k, false);
        dense_gemm(1, dm, w, x, false, self.w_v.value.data(), false, &mut v, false);
        let mut r = vec![S::zero(); w];
        linattn_step(state, &q, &k, &v, lit(self.decay), &mut r);
        let mut y = vec![S::zero(); dm];
        dense_gemm(1, w, dm, &r, false, self.w_o.value.data(), false, &mut y, false);
        (y, r)
    }
}

fn check_decay(decay: f64) -> Result<()> {
    if decay > 0.0 && decay <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("linear attention decay must lie in (0, 1], got {decay}")))
    }
}

impl<S: Scalar> HasParams<S> for LinearAttention<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        for p in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            f(p);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        for p in [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o] {
            f(p);
        }
    }
}
