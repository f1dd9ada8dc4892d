//! Anchor BCE over scaled cosine logits, cosine distillation, and their
//! weighted sum. Each loss returns its value and the gradient with respect
//! to its direct input.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{axpy, cosine, dot, l2_normalize, Matrix, NumericsError, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("student batch has {student} rows, teacher batch has {teacher}")]
    CountMismatch { student: usize, teacher: usize },
    #[error("logits are {logits:?} but targets are {targets:?}")]
    ShapeMismatch { logits: (usize, usize), targets: (usize, usize) },
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// How cosine similarities become logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
pub enum LogitMode {
    /// `Z = cos / τ`, the usual CLIP convention.
    #[default]
    #[serde(rename = "scale_by_inverse_tau")]
    ScaleByInverseTau,
    /// `Z = τ · cos`, taken literally.
    #[serde(rename = "scale_by_tau")]
    ScaleByTau,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct LossConfig {
    pub temperature: f64,
    pub logit_mode: LogitMode,
    /// Distillation weight λ.
    pub distill_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.07, logit_mode: LogitMode::ScaleByInverseTau, distill_weight: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LossError::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.distill_weight >= 0.0 && self.distill_weight.is_finite()) {
            return Err(LossError::Config(format!("distill_weight must be >= 0, got {}", self.distill_weight)));
        }
        Ok(())
    }

    /// Multiplier applied to cosines.
    pub fn logit_scale(&self) -> f64 {
        match self.logit_mode {
            LogitMode::ScaleByInverseTau => 1.0 / self.temperature,
            LogitMode::ScaleByTau => self.temperature,
        }
    }
}

/// One-hot supervision: one bucket index per batch row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchTargets {
    buckets: Vec<usize>,
    num_classes: usize,
}

impl BatchTargets {
    pub fn new(buckets: Vec<usize>, num_classes: usize) -> Result<Self, LossError> {
        if let Some(&b) = buckets.iter().find(|&&b| b >= num_classes) {
            return Err(LossError::Config(format!("bucket {b} out of range for {num_classes} classes")));
        }
        Ok(Self { buckets, num_classes })
    }

    pub fn buckets(&self) -> &[usize] {
        &self.buckets
    }

    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        Matrix::from_fn(
            self.buckets.len(),
            self.num_classes,
            |r, c| {
                if self.buckets[r] == c {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }
}

/// `Z[i][c] = s · cos(v_i, t_c)`; embeddings and anchors are unit vectors,
/// so the cosine is their dot product.
pub fn logits<T: Scalar>(embeddings: &[Vec<T>], anchors: &[Vec<T>], scale: T) -> Matrix<T> {
    Matrix::from_fn(embeddings.len(), anchors.len(), |i, c| scale * dot(&embeddings[i], &anchors[c]))
}

/// Pulls `dL/dZ` back to `dL/dv_i = s · Σ_c dZ[i][c] · t_c`.
pub fn logits_backward<T: Scalar>(grad_logits: &Matrix<T>, anchors: &[Vec<T>], scale: T) -> Vec<Vec<T>> {
    (0..grad_logits.rows())
        .map(|i| {
            let mut g = vec![T::zero(); anchors.first().map_or(0, Vec::len)];
            for (c, anchor) in anchors.iter().enumerate() {
                axpy(&mut g, scale * grad_logits.get(i, c), anchor);
            }
            g
        })
        .collect()
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mean element-wise binary cross-entropy with logits, and `dL/dZ`.
pub fn bce_loss<T: Scalar>(logits: &Matrix<T>, targets: &Matrix<T>) -> Result<(T, Matrix<T>), LossError> {
    if logits.shape() != targets.shape() {
        return Err(LossError::ShapeMismatch { logits: logits.shape(), targets: targets.shape() });
    }
    let n = logits.as_slice().len();
    if n == 0 {
        return Ok((T::zero(), logits.clone()));
    }
    let count = T::from_usize(n).expect("element count fits");
    let mut total = T::zero();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for ((&z, &y), g) in logits.as_slice().iter().zip(targets.as_slice()).zip(grad.as_mut_slice()) {
        // −[y·log σ(z) + (1−y)·log(1−σ(z))] = y·softplus(−z) + (1−y)·softplus(z)
        total += y * softplus(-z) + (T::one() - y) * softplus(z);
        *g = (sigmoid(z) - y) / count;
    }
    Ok((total / count, grad))
}

/// Mean cosine distance `(1/B)·Σ(1 − cos(v_i, v_i^T))` and its gradient with
/// respect to each unit student row, `−t̂_i / B`.
pub fn distillation_loss<T: Scalar>(student: &[Vec<T>], teacher: &[Vec<T>]) -> Result<(T, Vec<Vec<T>>), LossError> {
    if student.len() != teacher.len() {
        return Err(LossError::CountMismatch { student: student.len(), teacher: teacher.len() });
    }
    if student.is_empty() {
        return Ok((T::zero(), Vec::new()));
    }
    let b = T::from_usize(student.len()).expect("batch size fits");
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(student.len());
    for (s, t) in student.iter().zip(teacher) {
        total += T::one() - cosine(s, t)?;
        grads.push(l2_normalize(t)?.into_iter().map(|x| -x / b).collect());
    }
    Ok((total / b, grads))
}

/// `L = L_BCE + λ·L_dist`
pub fn total_loss<T: Scalar>(bce: T, dist: T, distill_weight: T) -> T {
    bce + distill_weight * dist
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LossBreakdown {
    pub bce: f64,
    pub distillation: f64,
    pub total: f64,
}
