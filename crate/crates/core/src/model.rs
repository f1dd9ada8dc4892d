//! The student: a residual two-layer head over frozen inputs,
//!
//! ```text
//! s = P·x + W2·gelu(W1·x + b1) + b2,   v = s / ‖s‖
//! ```
//!
//! Only `W1, b1, W2, b2` are trainable. `P` is the identity when the input
//! is the teacher embedding itself, otherwise a frozen map with orthonormal
//! columns (or rows, when the input is wider than the output).

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{read_f32_rows, write_f32_rows, DataError};
use crate::numerics::{dot, norm, random_orthonormal, seeded_rng, Matrix, NumericsError, Scalar};

const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
const CHECKPOINT_TENSORS: &str = "head.f32";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid head dimensions: {0}")]
    Dims(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// tanh-approximation GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + T::lit(0.044715) * x * x * x)).tanh())
}

pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentHead<T> {
    w1: Matrix<T>,
    b1: Vec<T>,
    w2: Matrix<T>,
    b2: Vec<T>,
    projection: Option<Matrix<T>>,
    seed: u64,
}

/// Intermediates of one forward pass, enough for exact backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub input: Vec<T>,
    pub pre_activation: Vec<T>,
    pub activation: Vec<T>,
    pub sum: Vec<T>,
    pub sum_norm: T,
    pub embedding: Vec<T>,
}

/// Gradients for the four trainable tensors, same shapes as the head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

impl<T: Scalar> HeadGradients<T> {
    pub fn zeros_like(head: &StudentHead<T>) -> Self {
        Self {
            w1: Matrix::zeros(head.hidden_dim(), head.input_dim()),
            b1: vec![T::zero(); head.hidden_dim()],
            w2: Matrix::zeros(head.output_dim(), head.hidden_dim()),
            b2: vec![T::zero(); head.output_dim()],
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        let pairs: [(&mut [T], &[T]); 4] = [
            (self.w1.as_mut_slice(), other.w1.as_slice()),
            (&mut self.b1, &other.b1),
            (self.w2.as_mut_slice(), other.w2.as_slice()),
            (&mut self.b2, &other.b2),
        ];
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
    }

    pub fn tensors(&self) -> [&[T]; 4] {
        [self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
    }
}

impl<T: Scalar> StudentHead<T> {
    /// Zero residual: the head starts as `x ↦ normalize(P·x)`.
    pub fn init_identity(
        input_dim: usize,
        output_dim: usize,
        hidden_dim: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if input_dim == 0 || output_dim == 0 || hidden_dim == 0 {
            return Err(ModelError::Dims(format!("{input_dim}, {output_dim}, {hidden_dim} must all be >= 1")));
        }
        let mut rng = seeded_rng(seed);
        let scale = T::lit((2.0 / input_dim as f64).sqrt());
        let w1 = Matrix::from_fn(hidden_dim, input_dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * T::lit(z)
        });
        let projection = (input_dim != output_dim).then(|| orthonormal_projection(output_dim, input_dim, &mut rng));
        Ok(Self {
            w1,
            b1: vec![T::zero(); hidden_dim],
            w2: Matrix::zeros(output_dim, hidden_dim),
            b2: vec![T::zero(); output_dim],
            projection,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> Option<&Matrix<T>> {
        self.projection.as_ref()
    }

    pub fn trainable(&self) -> [&[T]; 4] {
        [self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
    }

    pub fn trainable_mut(&mut self) -> [&mut [T]; 4] {
        [self.w1.as_mut_slice(), &mut self.b1, self.w2.as_mut_slice(), &mut self.b2]
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Rounds every tensor to `f32` precision, the checkpoint storage type.
    pub fn round_to_storage(&mut self) {
        let round = |x: &mut T| *x = T::from_f32(x.to_f32().expect("finite")).expect("f32 fits");
        for t in self.trainable_mut() {
            t.iter_mut().for_each(round);
        }
        if let Some(p) = self.projection.as_mut() {
            p.as_mut_slice().iter_mut().for_each(round);
        }
    }

    pub fn forward(&self, input: &[T]) -> Result<(Vec<T>, ForwardTrace<T>), ModelError> {
        if input.len() != self.input_dim() {
            return Err(NumericsError::ShapeMismatch {
                expected: format!("input of length {}", self.input_dim()),
                got: format!("length {}", input.len()),
            }
            .into());
        }
        let mut pre_activation = self.w1.matvec(input);
        pre_activation.iter_mut().zip(&self.b1).for_each(|(a, &b)| *a += b);
        let activation: Vec<T> = pre_activation.iter().map(|&a| gelu(a)).collect();

        let mut sum = match &self.projection {
            None => input.to_vec(),
            Some(p) => p.matvec(input),
        };
        let residual = self.w2.matvec(&activation);
        for ((s, r), &b) in sum.iter_mut().zip(residual).zip(&self.b2) {
            *s += r + b;
        }
        let sum_norm = norm(&sum);
        if !sum_norm.is_finite() {
            return Err(NumericsError::NonFinite { index: 0 }.into());
        }
        if sum_norm <= T::lit(crate::numerics::ZERO_NORM_EPS) {
            return Err(NumericsError::ZeroNorm.into());
        }
        let embedding: Vec<T> = sum.iter().map(|&s| s / sum_norm).collect();
        let trace = ForwardTrace {
            input: input.to_vec(),
            pre_activation,
            activation,
            sum,
            sum_norm,
            embedding: embedding.clone(),
        };
        Ok((embedding, trace))
    }

    /// Embeds without keeping a trace.
    pub fn embed(&self, input: &[T]) -> Result<Vec<T>, ModelError> {
        self.forward(input).map(|(v, _)| v)
    }

    /// Reverse-mode pass for one example, accumulated into `grads`.
    pub fn backward_into(&self, trace: &ForwardTrace<T>, grad_embedding: &[T], grads: &mut HeadGradients<T>) {
        // normalization Jacobian: (I − v vᵀ) / ‖s‖
        let v = &trace.embedding;
        let along = dot(v, grad_embedding);
        let grad_sum: Vec<T> =
            grad_embedding.iter().zip(v).map(|(&g, &vi)| (g - vi * along) / trace.sum_norm).collect();

        grads.b2.iter_mut().zip(&grad_sum).for_each(|(a, &g)| *a += g);
        grads.w2.add_outer(T::one(), &grad_sum, &trace.activation);

        let grad_act = self.w2.matvec_transposed(&grad_sum);
        let grad_pre: Vec<T> =
            grad_act.iter().zip(&trace.pre_activation).map(|(&g, &a)| g * gelu_derivative(a)).collect();
        grads.b1.iter_mut().zip(&grad_pre).for_each(|(a, &g)| *a += g);
        grads.w1.add_outer(T::one(), &grad_pre, &trace.input);
    }

    pub fn backward(&self, trace: &ForwardTrace<T>, grad_embedding: &[T]) -> HeadGradients<T> {
        let mut grads = HeadGradients::zeros_like(self);
        self.backward_into(trace, grad_embedding, &mut grads);
        grads
    }

    pub fn save(&self, dir: &Path, step: u64) -> Result<(), ModelError> {
        fs::create_dir_all(dir).map_err(|e| DataError::Io { path: dir.into(), source: e })?;
        let manifest = CheckpointManifest {
            format: "PCLIPF32".into(),
            version: crate::data::FORMAT_VERSION,
            kind: "student-head".into(),
            d_in: self.input_dim(),
            d: self.output_dim(),
            h: self.hidden_dim(),
            seed: self.seed,
            step,
            has_projection: self.projection.is_some(),
            tensors: vec!["w1".into(), "b1".into(), "w2".into(), "b2".into()]
                .into_iter()
                .chain(self.projection.is_some().then(|| "projection".to_string()))
                .collect(),
        };
        let path = dir.join(CHECKPOINT_MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest).expect("checkpoint manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| DataError::Io { path, source: e })?;

        let to_f64 = |s: &[T]| s.iter().map(|x| x.to_f64().expect("finite")).collect::<Vec<f64>>();
        let mut flat = Vec::with_capacity(self.num_trainable());
        for t in self.trainable() {
            flat.extend(to_f64(t));
        }
        if let Some(p) = &self.projection {
            flat.extend(to_f64(p.as_slice()));
        }
        write_f32_rows(&dir.join(CHECKPOINT_TENSORS), [flat.as_slice()])?;
        Ok(())
    }

    /// Returns the head and its recorded step count.
    pub fn load(dir: &Path) -> Result<(Self, u64), ModelError> {
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| DataError::Io { path: path.clone(), source: e })?;
        let m: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        if m.kind != "student-head" {
            return Err(ModelError::Checkpoint(format!("{}: not a student-head checkpoint", path.display())));
        }
        let (d_in, d, h) = (m.d_in, m.d, m.h);
        let mut total = h * d_in + h + d * h + d;
        if m.has_projection {
            total += d * d_in;
        }
        let rows = read_f32_rows(&dir.join(CHECKPOINT_TENSORS), 1, total)?;
        let flat: Vec<T> = rows[0].iter().map(|&x| T::lit(x)).collect();
        let mut at = 0;
        let mut take = |n: usize| {
            let s = flat[at..at + n].to_vec();
            at += n;
            s
        };
        let w1 = Matrix::new(h, d_in, take(h * d_in))?;
        let b1 = take(h);
        let w2 = Matrix::new(d, h, take(d * h))?;
        let b2 = take(d);
        let projection = if m.has_projection { Some(Matrix::new(d, d_in, take(d * d_in))?) } else { None };
        if projection.is_none() && d != d_in {
            return Err(ModelError::Checkpoint("d != d_in requires a projection tensor".into()));
        }
        Ok((Self { w1, b1, w2, b2, projection, seed: m.seed }, m.step))
    }
}

#[derive(Debug, Serialize, Deserialize, JsonSchema)]
pub struct CheckpointManifest {
    format: String,
    version: u32,
    kind: String,
    d_in: usize,
    d: usize,
    h: usize,
    seed: u64,
    step: u64,
    has_projection: bool,
    tensors: Vec<String>,
}

/// Random `rows × cols` map with orthonormal columns (`cols ≤ rows`) or
/// orthonormal rows (`cols > rows`), via modified Gram-Schmidt.
fn orthonormal_projection<T: Scalar>(rows: usize, cols: usize, rng: &mut crate::numerics::Rng) -> Matrix<T> {
    let (n_vecs, len) = if cols <= rows { (cols, rows) } else { (rows, cols) };
    let basis = random_orthonormal(n_vecs, len, &[], rng);
    if cols <= rows {
        Matrix::from_fn(rows, cols, |r, c| T::lit(basis[c][r]))
    } else {
        Matrix::from_fn(rows, cols, |r, c| T::lit(basis[r][c]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize;
    use rand::Rng as _;

    fn random_vec(rng: &mut crate::numerics::Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn perturbed_head(d_in: usize, d: usize, h: usize, seed: u64) -> StudentHead<f64> {
        let mut head = StudentHead::init_identity(d_in, d, h, seed).unwrap();
        let mut rng = seeded_rng(seed + 100);
        for t in head.trainable_mut() {
            t.iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
        }
        head
    }

    /// Straight-line evaluation of the head formula, sharing nothing with
    /// `forward` beyond the parameter accessors.
    fn reference_forward(head: &StudentHead<f64>, x: &[f64]) -> Vec<f64> {
        let [w1, b1, w2, b2] = head.trainable();
        let (h, d_in, d) = (head.hidden_dim(), head.input_dim(), head.output_dim());
        let mut hidden = vec![0.0; h];
        for i in 0..h {
            let mut a = b1[i];
            for j in 0..d_in {
                a += w1[i * d_in + j] * x[j];
            }
            hidden[i] = 0.5 * a * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (a + 0.044715 * a.powi(3))).tanh());
        }
        let mut s = vec![0.0; d];
        for i in 0..d {
            let mut acc = match head.projection() {
                None => x[i],
                Some(p) => (0..d_in).map(|j| p.get(i, j) * x[j]).sum(),
            };
            for k in 0..h {
                acc += w2[i * h + k] * hidden[k];
            }
            s[i] = acc + b2[i];
        }
        let n = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        s.into_iter().map(|v| v / n).collect()
    }

    #[test]
    fn identity_at_init() {
        let head = StudentHead::<f64>::init_identity(6, 6, 16, 3).unwrap();
        let mut rng = seeded_rng(9);
        for _ in 0..100 {
            let x = random_vec(&mut rng, 6);
            let out = head.embed(&x).unwrap();
            assert_eq!(out, l2_normalize(&x).unwrap());
        }
        let e1 = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(head.embed(&e1).unwrap(), e1.to_vec());
        assert_eq!(head.trainable().len(), 4);
    }

    #[test]
    fn init_is_seeded() {
        let a = StudentHead::<f64>::init_identity(5, 3, 8, 11).unwrap();
        assert_eq!(a, StudentHead::init_identity(5, 3, 8, 11).unwrap());
        assert_ne!(a, StudentHead::init_identity(5, 3, 8, 12).unwrap());
        assert!(StudentHead::<f64>::init_identity(0, 3, 8, 1).is_err());
    }

    #[test]
    fn projection_is_orthonormal() {
        for (d_in, d) in [(3, 7), (7, 3)] {
            let head = StudentHead::<f64>::init_identity(d_in, d, 4, 5).unwrap();
            let p = head.projection().unwrap();
            let (n, len, get): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if d_in <= d {
                (d_in, d, Box::new(|k, i| p.get(i, k)))
            } else {
                (d, d_in, Box::new(|k, i| p.get(k, i)))
            };
            for a in 0..n {
                for b in 0..n {
                    let g: f64 = (0..len).map(|i| get(a, i) * get(b, i)).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((g - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = seeded_rng(1);
        for (d_in, d) in [(5, 5), (4, 6), (6, 3)] {
            let head = perturbed_head(d_in, d, 7, 21);
            for _ in 0..20 {
                let x = random_vec(&mut rng, d_in);
                let out = head.embed(&x).unwrap();
                let want = reference_forward(&head, &x);
                for (a, b) in out.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert!((norm(&out) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_errors() {
        let head = StudentHead::<f64>::init_identity(3, 3, 2, 0).unwrap();
        assert!(matches!(head.embed(&[1.0, 0.0]), Err(ModelError::Numerics(NumericsError::ShapeMismatch { .. }))));
        assert!(matches!(head.embed(&[0.0, 0.0, 0.0]), Err(ModelError::Numerics(NumericsError::ZeroNorm))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let head = perturbed_head(4, 4, 5, 2);
        let (_, trace) = head.forward(&[0.1, 0.4, -0.3, 0.9]).unwrap();
        let g = head.backward(&trace, &[0.0; 4]);
        assert!(g.tensors().iter().all(|t| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn gradient_along_embedding_vanishes() {
        let head = perturbed_head(4, 4, 5, 2);
        let (v, trace) = head.forward(&[0.1, 0.4, -0.3, 0.9]).unwrap();
        let g = head.backward(&trace, &v);
        for t in g.tensors() {
            assert!(t.iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0_f64, -1.0, -0.2, 0.0, 0.5, 2.0, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded_rng(4);
        for (d_in, d) in [(4, 4), (3, 5)] {
            let head = perturbed_head(d_in, d, 6, 8);
            let x = random_vec(&mut rng, d_in);
            let probe = random_vec(&mut rng, d);
            // scalar objective f = probe · v
            let f = |h: &StudentHead<f64>| dot(&probe, &h.embed(&x).unwrap());
            let (_, trace) = head.forward(&x).unwrap();
            let grads = head.backward(&trace, &probe);
            for (ti, analytic) in grads.tensors().iter().enumerate() {
                for (k, &a) in analytic.iter().enumerate() {
                    let mut plus = head.clone();
                    plus.trainable_mut()[ti][k] += 1e-5;
                    let mut minus = head.clone();
                    minus.trainable_mut()[ti][k] -= 1e-5;
                    let fd = (f(&plus) - f(&minus)) / 2e-5;
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                    assert!(rel < 1e-4 || (a - fd).abs() < 1e-9, "tensor {ti}[{k}]: {a} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        for (d_in, d) in [(4, 4), (5, 3)] {
            let mut head = perturbed_head(d_in, d, 6, 2);
            head.round_to_storage();
            head.save(dir.path(), 17).unwrap();
            let (back, step) = StudentHead::<f64>::load(dir.path()).unwrap();
            assert_eq!(step, 17);
            assert_eq!(back, head);
            let x = [0.3, -0.1, 0.8, 0.2, 0.5][..d_in].to_vec();
            let (a, b) = (head.embed(&x).unwrap(), back.embed(&x).unwrap());
            assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn runs_in_f32() {
        let head = StudentHead::<f32>::init_identity(3, 3, 4, 0).unwrap();
        let out = head.embed(&[3.0, 0.0, 4.0]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-6);
    }
}
