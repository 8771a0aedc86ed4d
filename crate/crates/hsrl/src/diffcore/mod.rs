//! Dense f64 numeric core with reverse-mode gradient support.
//!
//! Everything the decoders compute is built from [`tape::Tape`] operations so
//! that one backward pass yields exact gradients for every [`Parameter`].
//! Gradients are verified against central finite differences in
//! [`gradcheck`].

pub mod gradcheck;
pub mod lstm;
pub mod tape;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{HsrlError, Result};

/// Uniform initialization bound for learnable parameters.
pub const INIT_BOUND: f64 = 0.08;

/// Row-major dense array of f64 values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumArray {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl NumArray {
    pub fn zeros(shape: &[usize]) -> Self {
        let count = shape.iter().product();
        NumArray {
            shape: shape.to_vec(),
            values: vec![0.0; count],
        }
    }

    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != values.len() {
            return Err(HsrlError::dimension(
                "NumArray::from_vec",
                format!("{count} values for shape {shape:?}"),
                format!("{} values", values.len()),
            ));
        }
        Ok(NumArray {
            shape: shape.to_vec(),
            values,
        })
    }

    pub fn scalar(value: f64) -> Self {
        NumArray {
            shape: vec![1],
            values: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        NumArray {
            shape: vec![values.len()],
            values,
        }
    }

    /// One-hot vector of length `len` with a 1.0 at `index`.
    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(HsrlError::Index(format!(
                "one_hot index {index} out of range for length {len}"
            )));
        }
        let mut values = vec![0.0; len];
        values[index] = 1.0;
        Ok(NumArray::vector(values))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Interpret as a matrix, returning (rows, cols).
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(HsrlError::dimension(
                "dims2",
                "a rank-2 array",
                format!("shape {other:?}"),
            )),
        }
    }

    /// Extract the single value of a scalar (shape [1]) array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1, "item() on non-scalar");
        self.values[0]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.values.iter_mut().for_each(|v| *v = value);
    }
}

/// A learnable array paired with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub data: NumArray,
    pub grad: NumArray,
}

impl Parameter {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Parameter {
            name: name.into(),
            data: NumArray::zeros(shape),
            grad: NumArray::zeros(shape),
        }
    }

    /// Uniform init in [-INIT_BOUND, INIT_BOUND].
    pub fn uniform(name: impl Into<String>, shape: &[usize], rng: &mut SeededRng) -> Self {
        let mut p = Parameter::zeros(name, shape);
        for v in p.data.values_mut() {
            *v = rng.uniform_in(-INIT_BOUND, INIT_BOUND);
        }
        p
    }

    pub fn reset_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn add_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.grad.len());
        for (dst, src) in self.grad.values_mut().iter_mut().zip(g) {
            *dst += *src;
        }
    }
}

/// Anything that owns a flat collection of named parameters.
pub trait ParamSet {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.reset_grad());
    }

    /// Total scalar count across all parameters.
    fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.data.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name.clone()));
        names
    }

    /// Copy of all parameter values, for bit-exact trajectory comparisons.
    fn snapshot(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name.clone(), p.data.values().to_vec())));
        out
    }

    /// Sum of squared gradient entries across all parameters.
    fn grad_sq_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.visit_params(&mut |p| {
            for g in p.grad.values() {
                acc += g * g;
            }
        });
        acc
    }
}

impl ParamSet for Vec<Parameter> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        for p in self {
            f(p);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for p in self {
            f(p);
        }
    }
}

/// Weight + bias pair for a single linear map.
#[derive(Clone, Debug)]
pub struct AffineParams {
    pub w: Parameter,
    pub b: Parameter,
}

impl AffineParams {
    pub fn init(name: &str, out_dim: usize, in_dim: usize, rng: &mut SeededRng) -> Self {
        AffineParams {
            w: Parameter::uniform(format!("{name}.w"), &[out_dim, in_dim], rng),
            b: Parameter::zeros(format!("{name}.b"), &[out_dim]),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.w);
        f(&self.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Deterministic RNG: ChaCha8 keyed by a 64-bit seed. Identical seeds give
/// identical draw sequences on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.inner.random_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.inner);
    }

    /// Derive an independent child stream.
    pub fn split(&mut self) -> SeededRng {
        let child = self.inner.random::<u64>();
        SeededRng::new(child)
    }

    /// Inverse-CDF draw from a probability vector. The probabilities are
    /// expected to sum to 1; the last index absorbs rounding slack.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        debug_assert!(!probs.is_empty());
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_count() {
        assert!(NumArray::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        let a = NumArray::from_vec(&[2, 2], vec![1.0; 4]).unwrap();
        assert_eq!(a.dims2().unwrap(), (2, 2));
    }

    #[test]
    fn seeded_rng_is_reproducible() {
        let mut a = SeededRng::new(99);
        let mut b = SeededRng::new(99);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
        let mut c = SeededRng::new(100);
        let draws_a: Vec<f64> = (0..8).map(|_| a.uniform()).collect();
        let draws_c: Vec<f64> = (0..8).map(|_| c.uniform()).collect();
        assert_ne!(draws_a, draws_c);
    }

    #[test]
    fn categorical_respects_mass() {
        let mut rng = SeededRng::new(3);
        let mut counts = [0usize; 2];
        for _ in 0..2000 {
            counts[rng.categorical(&[0.9, 0.1])] += 1;
        }
        assert!(counts[0] > 1600, "counts: {counts:?}");
    }

    #[test]
    fn parameter_uniform_within_bound() {
        let mut rng = SeededRng::new(1);
        let p = Parameter::uniform("w", &[4, 4], &mut rng);
        assert!(p.data.values().iter().all(|v| v.abs() <= INIT_BOUND));
        assert!(p.grad.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_bounds() {
        assert!(NumArray::one_hot(3, 3).is_err());
        let v = NumArray::one_hot(3, 1).unwrap();
        assert_eq!(v.values(), &[0.0, 1.0, 0.0]);
    }
}
