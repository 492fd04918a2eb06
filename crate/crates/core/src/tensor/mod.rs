//! Dense tensors, a reverse-mode tape, seeded randomness and a
//! finite-difference gradient checker.
//!
//! Tensors are row-major with rank 1 to 4. Shape coercion is never
//! implicit: the only batched form is an explicit leading extent on
//! [`Tape::matmul`], and row-wise bias/scale are separate named ops.

mod gradcheck;
mod ops;
mod prng;
mod scalar;
mod tape;

pub use gradcheck::{grad_check, grad_check_projected, relative_error};
pub use ops::{dense_gemm, naive_matmul, Seq};
pub(crate) use ops::{linattn_step, sigmoid};
pub use prng::{stable_hash, Prng};
pub use scalar::{lit, DType, Scalar};
pub use tape::{Gradients, NodeId, Tape, Var};

use crate::error::{Error, Result};

/// Dense row-major array with an optional gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be between 1 and 4".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, rejecting bad shapes, length mismatches and
    /// non-finite values.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let n = validate_shape(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {n} values, got {}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "Tensor::new".into(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Internal constructor for op outputs whose shape is known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = validate_shape(&shape)?;
        Ok(Self::from_parts(shape, vec![S::zero(); n]))
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Result<Self> {
        let shape = shape.into();
        let n = validate_shape(&shape)?;
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: S) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros([n, n])?;
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        Ok(t)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Result<Self> {
        let shape = shape.into();
        let n = validate_shape(&shape)?;
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut Prng) -> Result<Self> {
        Self::from_fn(shape, |_| S::from_f64_lossy(rng.normal() * std))
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut Prng,
    ) -> Result<Self> {
        Self::from_fn(shape, |_| S::from_f64_lossy(lo + (hi - lo) * rng.uniform()))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable access to the values. Used by optimizers and test fixtures;
    /// callers are responsible for keeping values finite.
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Rows/cols of a rank-2 tensor (rank-1 counts as a single row).
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [m, n] => (*m, *n),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let (_, n) = self.dims2();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn get(&self, index: &[usize]) -> S {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} (extent {d})");
            flat = flat * d + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = validate_shape(&shape)?;
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self::from_parts(shape, self.data.clone()))
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (m, n) = match self.shape.as_slice() {
            [m, n] => (*m, *n),
            _ => {
                return Err(Error::InvalidShape {
                    shape: self.shape.clone(),
                    reason: "transpose needs rank 2".into(),
                })
            }
        };
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let mut t = Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| T::from_f64_lossy(v.as_f64())).collect(),
        );
        t.requires_grad = self.requires_grad;
        if t.requires_grad {
            t.grad = Some(vec![T::zero(); t.data.len()]);
        }
        t
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Errors if any value is NaN or infinite.
    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op: op.to_string() })
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    // --- gradient slot ---

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor as trainable and allocates a zeroed accumulator.
    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        self.grad = flag.then(|| vec![S::zero(); self.data.len()]);
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [S]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn accumulate_grad(&mut self, g: &[S]) {
        if let Some(acc) = self.grad.as_mut() {
            assert_eq!(acc.len(), g.len(), "gradient length");
            for (a, b) in acc.iter_mut().zip(g) {
                *a += *b;
            }
        }
    }

    /// Values and grad slot split for in-place optimizer updates.
    pub fn values_and_grad_mut(&mut self) -> (&mut [S], Option<&[S]>) {
        (&mut self.data, self.grad.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::zeros(vec![0, 2]).is_err());
        assert!(Tensor::<f64>::zeros(vec![1, 1, 1, 1, 1]).is_err());
        assert!(Tensor::<f64>::zeros(Vec::new()).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let e = Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(e, Error::NonFinite { .. }));
        assert!(Tensor::<f32>::new(vec![1], vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn grad_slot_matches_shape() {
        let t = Tensor::<f64>::zeros([3, 2]).unwrap().with_grad();
        assert_eq!(t.grad().unwrap().len(), 6);
        let u = Tensor::<f64>::zeros([3, 2]).unwrap();
        assert!(u.grad().is_none());
    }

    #[test]
    fn transpose_roundtrip() {
        let mut rng = Prng::new(1);
        let a = Tensor::<f64>::randn([3, 5], 1.0, &mut rng).unwrap();
        assert_eq!(a.transpose2().unwrap().transpose2().unwrap(), a);
    }
}

#[cfg(test)]
mod op_tests;
