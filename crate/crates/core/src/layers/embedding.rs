use crate::error::Result;
use crate::params::{Binder, HasParams, Param, ParamGroup};
use crate::tensor::{Prng, Scalar, Var};

/// Token embedding table `E: [|V|, D]`; the output head reuses `Eᵀ`.
#[derive(Clone, Debug)]
pub struct Embedding<S: Scalar> {
    pub table: Param<S>,
}

impl<S: Scalar> Embedding<S> {
    pub fn init(name: &str, vocab: usize, d_model: usize, std: f64, rng: &Prng) -> Result<Self> {
        Ok(Self {
            table: Param::normal(name, &[vocab, d_model], std, rng, ParamGroup::Base)?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.table.value.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.table.value.shape()[1]
    }

    pub fn embed(&self, b: &Binder<S>, ids: &[usize]) -> Result<Var<S>> {
        b.tape().embed(ids, &b.bind(&self.table))
    }

    pub fn unembed(&self, b: &Binder<S>, y: &Var<S>) -> Result<Var<S>> {
        b.tape().matmul_nt(y, &b.bind(&self.table))
    }

    pub fn unembed_row(&self, y: &[S]) -> Vec<S> {
        let d = self.d_model();
        self.table
            .value
            .data()
            .chunks(d)
            .map(|row| row.iter().zip(y).map(|(a, b)| *a * *b).sum())
            .collect()
    }
}

impl<S: Scalar> HasParams<S> for Embedding<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        f(&self.table);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.table);
    }
}
