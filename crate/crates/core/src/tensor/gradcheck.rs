use super::{Prng, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar<F>(f: &F, x: Tensor<f64>) -> Result<f64>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let tape = Tape::inference();
    let xv = tape.constant(x);
    let y = f(&tape, &xv)?;
    if y.value().len() != 1 {
        return Err(Error::NonScalarLoss(y.shape().to_vec()));
    }
    let v = y.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite {
            op: "grad_check objective".into(),
        });
    }
    Ok(v)
}

/// Compares the tape gradient of a scalar function against central
/// differences and returns the maximum relative error over coordinates.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let mut leaf = x.clone();
    leaf.set_requires_grad(true);
    let xv = tape.leaf(&leaf);
    let y = f(&tape, &xv)?;
    y.value().check_finite("grad_check objective")?;
    let grads = tape.backward(&y)?;
    let analytic = grads.wrt(&xv);

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval_scalar(&f, plus)? - eval_scalar(&f, minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// [`grad_check`] for a tensor-valued function, reduced to a scalar by a
/// fixed random projection drawn from `seed`.
pub fn grad_check_projected<F>(f: F, x: &Tensor<f64>, eps: f64, seed: u64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let probe = {
        let tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let y = f(&tape, &xv)?;
        let mut rng = Prng::new(seed).derive("grad_check_projection");
        Tensor::randn(y.shape().to_vec(), 1.0, &mut rng)?
    };
    grad_check(
        move |tape, xv| {
            let y = f(tape, xv)?;
            tape.dot_const(&y, &probe)
        },
        x,
        eps,
    )
}
