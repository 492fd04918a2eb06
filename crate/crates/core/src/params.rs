//! Named parameters and their binding onto a tape.

use std::cell::RefCell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Gradients, Prng, Scalar, Tape, Tensor, Var};

/// Optimizer group; Resona parameters can get their own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Base,
    Resona,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub group: ParamGroup,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>, group: ParamGroup, decay: bool) -> Self {
        Self {
            name: name.into(),
            value: value.with_grad(),
            group,
            decay,
        }
    }

    /// `normal(0, std)` weights drawn from a stream derived from the name,
    /// so adding or removing other parameters never shifts these values.
    pub fn normal(
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &Prng,
        group: ParamGroup,
    ) -> Result<Self> {
        let name = name.into();
        let mut stream = rng.derive(&name);
        let value = Tensor::randn(shape.to_vec(), std, &mut stream)?;
        Ok(Self::new(name, value, group, true))
    }

    /// Random matrix with orthonormal columns (or rows, when wider than
    /// tall), from Gram-Schmidt on a name-derived Gaussian draw.
    pub fn orthogonal(name: impl Into<String>, rows: usize, cols: usize, rng: &Prng, group: ParamGroup) -> Result<Self> {
        let name = name.into();
        let mut stream = rng.derive(&name);
        let (n, m) = (rows.max(cols), rows.min(cols));
        // m orthonormal vectors of length n
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
        while basis.len() < m {
            let mut v: Vec<f64> = (0..n).map(|_| stream.normal()).collect();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let value = Tensor::from_fn([rows, cols], |i| {
            let (r, c) = (i / cols, i % cols);
            S::from_f64_lossy(if rows >= cols { basis[c][r] } else { basis[r][c] })
        })?;
        Ok(Self::new(name, value, group, true))
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize], group: ParamGroup, decay: bool) -> Result<Self> {
        Ok(Self::new(name, Tensor::zeros(shape.to_vec())?, group, decay))
    }

    pub fn ones(name: impl Into<String>, shape: &[usize], group: ParamGroup) -> Result<Self> {
        Ok(Self::new(name, Tensor::full(shape.to_vec(), S::one())?, group, false))
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything that owns parameters.
pub trait HasParams<S: Scalar> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.numel());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p.name.clone()));
        out
    }

    fn zero_grads(&mut self) {
        self.visit_mut(&mut |p| p.value.zero_grad());
    }
}

/// Maps parameters onto tape leaves for one forward pass.
pub struct Binder<'t, S: Scalar> {
    tape: &'t Tape<S>,
    bound: RefCell<Vec<(String, Var<S>)>>,
    index: RefCell<HashMap<String, usize>>,
}

impl<'t, S: Scalar> Binder<'t, S> {
    pub fn new(tape: &'t Tape<S>) -> Self {
        Self {
            tape,
            bound: RefCell::new(Vec::new()),
            index: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    /// Leaf for `p`; binding the same name twice returns the same var.
    pub fn bind(&self, p: &Param<S>) -> Var<S> {
        if let Some(&i) = self.index.borrow().get(&p.name) {
            return self.bound.borrow()[i].1.clone();
        }
        let v = self.tape.leaf(&p.value);
        let mut bound = self.bound.borrow_mut();
        self.index.borrow_mut().insert(p.name.clone(), bound.len());
        bound.push((p.name.clone(), v.clone()));
        v
    }

    /// Makes later `bind` calls for `name` return `var`.
    pub fn override_param(&self, name: &str, var: Var<S>) {
        let mut bound = self.bound.borrow_mut();
        self.index.borrow_mut().insert(name.to_string(), bound.len());
        bound.push((name.to_string(), var));
    }

    pub fn into_bound(self) -> BoundParams<S> {
        BoundParams {
            vars: self.bound.into_inner(),
        }
    }
}

/// Bound leaves, kept past the tape so gradients can be collected.
pub struct BoundParams<S: Scalar> {
    vars: Vec<(String, Var<S>)>,
}

impl<S: Scalar> BoundParams<S> {
    /// Per-name gradients of every bound parameter reached by backward.
    pub fn collect(&self, grads: &Gradients<S>) -> HashMap<String, Vec<S>> {
        self.vars
            .iter()
            .filter_map(|(n, v)| grads.get(v).map(|g| (n.clone(), g.to_vec())))
            .collect()
    }
}

/// Adds named gradients into a model's accumulators.
pub fn accumulate<S: Scalar, M: HasParams<S> + ?Sized>(model: &mut M, grads: &HashMap<String, Vec<S>>) {
    model.visit_mut(&mut |p| {
        if let Some(g) = grads.get(&p.name) {
            p.value.accumulate_grad(g);
        }
    });
}
