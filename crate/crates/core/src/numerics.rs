//! Dense vector and matrix arithmetic, cosine similarity, seeded random
//! streams and the Adam optimizer.
//!
//! Vectors are plain slices; [`Matrix`] is a row-major owned buffer. All
//! operations are generic over [`Scalar`] so the same code runs in `f32`
//! and `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floating point scalar usable throughout the crate: `f32` or `f64`.
pub trait Scalar: Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static {
    /// Lossless-for-literals conversion from `f64`.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("scalar literal out of range")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Norms at or below this are treated as a degenerate (zero) vector.
pub const ZERO_NORM_EPS: f64 = 1e-30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("vector norm is zero or below {ZERO_NORM_EPS:e}")]
    ZeroNorm,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
}

pub fn dot<T: Scalar>(u: &[T], v: &[T]) -> T {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(&a, &b)| a * b).sum()
}

pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean length.
pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>, NumericsError> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(first_non_finite(v));
    }
    if n <= T::lit(ZERO_NORM_EPS) {
        return Err(NumericsError::ZeroNorm);
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine<T: Scalar>(u: &[T], v: &[T]) -> Result<T, NumericsError> {
    check_len(u.len(), v.len())?;
    let nu = norm(u);
    let nv = norm(v);
    if !(nu.is_finite() && nv.is_finite()) {
        return Err(NumericsError::NonFinite { index: 0 });
    }
    let eps = T::lit(ZERO_NORM_EPS);
    if nu <= eps || nv <= eps {
        return Err(NumericsError::ZeroNorm);
    }
    let c = dot(u, v) / (nu * nv);
    Ok(c.max(-T::one()).min(T::one()))
}

pub fn check_finite<T: Scalar>(v: &[T]) -> Result<(), NumericsError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(NumericsError::NonFinite { index }),
        None => Ok(()),
    }
}

fn first_non_finite<T: Scalar>(v: &[T]) -> NumericsError {
    let index = v.iter().position(|x| !x.is_finite()).unwrap_or(0);
    NumericsError::NonFinite { index }
}

fn check_len(expected: usize, got: usize) -> Result<(), NumericsError> {
    if expected != got {
        return Err(NumericsError::ShapeMismatch {
            expected: format!("length {expected}"),
            got: format!("length {got}"),
        });
    }
    Ok(())
}

/// `acc += alpha * x`
pub fn axpy<T: Scalar>(acc: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::ShapeMismatch {
                expected: format!("{rows}x{cols} = {} values", rows * cols),
                got: format!("{} values", data.len()),
            });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Stacks equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_len(cols, row.len())?;
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x`
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_transposed(&self, y: &[T]) -> Vec<T> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (r, &yr) in y.iter().enumerate() {
            axpy(&mut out, yr, self.row(r));
        }
        out
    }

    /// `self += alpha · u vᵀ`
    pub fn add_outer(&mut self, alpha: T, u: &[T], v: &[T]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let scale = alpha * ur;
            if scale != T::zero() {
                let cols = self.cols;
                axpy(&mut self.data[r * cols..(r + 1) * cols], scale, v);
            }
        }
    }
}

/// Deterministic, platform-stable random stream (ChaCha with 8 rounds).
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream tag (splitmix64 finalizer), giving
/// independent sub-seeds that do not depend on evaluation order.
/// `count` random orthonormal vectors of length `len`, also orthogonal to
/// every vector in `avoid` (which must itself be orthonormal).
pub fn random_orthonormal(count: usize, len: usize, avoid: &[Vec<f64>], rng: &mut Rng) -> Vec<Vec<f64>> {
    assert!(count + avoid.len() <= len, "cannot fit {count} orthonormal vectors in dimension {len}");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        for b in avoid.iter().chain(&basis) {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, &y)| *x -= c * y);
        }
        let n = norm(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit FNV-1a hash of a string, for deriving per-name streams.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment accumulators for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self { config, first_moment: vec![T::zero(); len], second_moment: vec![T::zero(); len], step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState<T>) -> Result<(), NumericsError> {
    check_len(params.len(), grads.len())?;
    check_len(state.len(), params.len())?;
    check_finite(grads)?;

    state.step += 1;
    let cfg = state.config;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let lr = T::lit(cfg.learning_rate);
    let eps = T::lit(cfg.epsilon);
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let bias1 = T::one() - b1.powi(t);
    let bias2 = T::one() - b2.powi(t);

    for (((p, &g), m), v) in
        params.iter_mut().zip(grads).zip(state.first_moment.iter_mut()).zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Plain gradient descent, kept for ablations.
pub fn sgd_step<T: Scalar>(params: &mut [T], grads: &[T], learning_rate: T) -> Result<(), NumericsError> {
    check_len(params.len(), grads.len())?;
    check_finite(grads)?;
    axpy(params, -learning_rate, grads);
    Ok(())
}
