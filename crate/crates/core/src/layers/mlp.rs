use crate::error::Result;
use crate::params::{Binder, HasParams, Param, ParamGroup};
use crate::tensor::{dense_gemm, lit, sigmoid, Prng, Scalar, Var};

pub const RMS_EPS: f64 = 1e-6;

/// Learned-gain RMS normalisation over the last extent.
#[derive(Clone, Debug)]
pub struct RmsNorm<S: Scalar> {
    pub gain: Param<S>,
}

impl<S: Scalar> RmsNorm<S> {
    pub fn init(name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: Param::ones(format!("{name}.gain"), &[width], ParamGroup::Base)?,
        })
    }

    pub fn forward(&self, b: &Binder<S>, x: &Var<S>) -> Result<Var<S>> {
        b.tape().rmsnorm(x, &b.bind(&self.gain), RMS_EPS)
    }

    /// Single-row version used by incremental decoding.
    pub fn row(&self, x: &[S]) -> Vec<S> {
        let n = lit::<S>(x.len() as f64);
        let ms = x.iter().map(|v| *v * *v).sum::<S>() * (S::one() / n);
        let r = S::one() / (ms + lit(RMS_EPS)).sqrt();
        x.iter().zip(self.gain.value.data()).map(|(v, g)| *v * r * *g).collect()
    }
}

impl<S: Scalar> HasParams<S> for RmsNorm<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        f(&self.gain);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.gain);
    }
}

/// `(silu(x W_1) ⊙ x W_3) W_2`.
#[derive(Clone, Debug)]
pub struct SwiGlu<S: Scalar> {
    pub w1: Param<S>,
    pub w3: Param<S>,
    pub w2: Param<S>,
}

impl<S: Scalar> SwiGlu<S> {
    pub fn init(prefix: &str, d_model: usize, hidden: usize, rng: &Prng) -> Result<Self> {
        let g = ParamGroup::Base;
        Ok(Self {
            w1: Param::normal(format!("{prefix}.w1"), &[d_model, hidden], 0.02, rng, g)?,
            w3: Param::normal(format!("{prefix}.w3"), &[d_model, hidden], 0.02, rng, g)?,
            w2: Param::zeros(format!("{prefix}.w2"), &[hidden, d_model], g, true)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w1.value.shape()[1]
    }

    pub fn forward(&self, b: &Binder<S>, x: &Var<S>) -> Result<Var<S>> {
        let tape = b.tape();
        let gate = tape.silu(&tape.matmul(x, &b.bind(&self.w1))?);
        let up = tape.matmul(x, &b.bind(&self.w3))?;
        tape.matmul(&tape.mul(&gate, &up)?, &b.bind(&self.w2))
    }

    pub fn row(&self, x: &[S]) -> Vec<S> {
        let (d, h) = (x.len(), self.hidden());
        let mut a = vec![S::zero(); h];
        let mut u = vec![S::zero(); h];
        dense_gemm(1, d, h, x, false, self.w1.value.data(), false, &mut a, false);
        dense_gemm(1, d, h, x, false, self.w3.value.data(), false, &mut u, false);
        for (a, u) in a.iter_mut().zip(&u) {
            *a = *a * sigmoid(*a) * *u;
        }
        let mut y = vec![S::zero(); d];
        dense_gemm(1, h, d, &a, false, self.w2.value.data(), false, &mut y, false);
        y
    }
}

impl<S: Scalar> HasParams<S> for SwiGlu<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        for p in [&self.w1, &self.w3, &self.w2] {
            f(p);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        for p in [&mut self.w1, &mut self.w3, &mut self.w2] {
            f(p);
        }
    }
}
