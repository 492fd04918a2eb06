use std::collections::HashMap;

use crate::params::{HasParams, ParamGroup};
use crate::tensor::{lit, Scalar};

/// Linear warmup from 0 to `base` over the first `warmup` fraction of
/// `steps`, then cosine decay reaching 0 at step `steps - 1`.
pub fn lr_at(step: usize, steps: usize, base: f64, warmup: f64) -> f64 {
    let w = (warmup * steps as f64).floor() as usize;
    if step < w {
        return base * step as f64 / w as f64;
    }
    let last = steps.saturating_sub(1);
    if last <= w {
        return base;
    }
    let progress = (step.min(last) - w) as f64 / (last - w) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm of all parameter gradients.
pub fn grad_norm<S: Scalar, M: HasParams<S> + ?Sized>(model: &M) -> f64 {
    let mut sq = 0.0f64;
    model.visit(&mut |p| {
        if let Some(g) = p.value.grad() {
            for v in g {
                let v = v.as_f64();
                sq += v * v;
            }
        }
    });
    sq.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm<S: Scalar, M: HasParams<S> + ?Sized>(model: &mut M, max_norm: f64) -> f64 {
    let norm = grad_norm(model);
    if norm > max_norm {
        let c: S = lit(max_norm / norm);
        model.visit_mut(&mut |p| {
            if let Some(g) = p.value.grad_mut() {
                g.iter_mut().for_each(|v| *v *= c);
            }
        });
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: HashMap<String, Vec<S>>,
    pub v: HashMap<String, Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update with learning rate `lr` (times `resona_mult` for
    /// retrieval parameters). Decoupled decay applies to weight matrices.
    pub fn step<M: HasParams<S> + ?Sized>(&mut self, model: &mut M, lr: f64, resona_mult: f64) {
        self.t += 1;
        let (b1, b2) = (lit::<S>(self.beta1), lit::<S>(self.beta2));
        let one = S::one();
        let bc1 = lit::<S>(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = lit::<S>(1.0 - self.beta2.powi(self.t as i32));
        let eps = lit::<S>(self.eps);
        model.visit_mut(&mut |p| {
            let lr = lit::<S>(if p.group == ParamGroup::Resona { lr * resona_mult } else { lr });
            let wd = lit::<S>(if p.decay { self.weight_decay } else { 0.0 });
            let n = p.value.len();
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![S::zero(); n]);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![S::zero(); n]);
            let (w, g) = p.value.values_and_grad_mut();
            let Some(g) = g else { return };
            for i in 0..n {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * (mh / (vh.sqrt() + eps) + wd * w[i]);
            }
        });
    }
}
