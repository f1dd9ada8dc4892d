//! Synthetic embedding benchmark with controlled label co-occurrence and
//! embedding entanglement.
//!
//! Labels come from a primary-finding model: each image draws at most one
//! primary finding, and the primary then pulls in other findings with
//! directed co-occurrence probabilities. Primary probabilities are solved so
//! that every finding's marginal prevalence is exactly the configured one.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::{fill_template, AnchorConfig, COMPLEX_TEMPLATES};
use crate::data::{
    DataError, Dataset, LabelVocabulary, LabeledExample, PromptEmbedding, PromptRole, Split, TextArchive,
};
use crate::numerics::{derive_seed, l2_normalize, random_orthonormal, seeded_rng, Rng};

const PROTOTYPE_STREAM: u64 = 0x5052_4f54;
const NUISANCE_STREAM: u64 = 0x4e55_4953;
const TEXT_STREAM: u64 = 0x5445_5854;
const EXAMPLE_STREAM: u64 = 0x4558_0000_0000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FindingSpec {
    pub name: String,
    /// Marginal probability of the label.
    pub prevalence: f64,
    /// Angle in degrees between an image's class center and the prototype.
    #[serde(default)]
    pub dispersion_deg: f64,
}

/// When `primary` is an image's primary finding, `with` is added to its
/// labels with `probability`, and the image embedding is pulled towards the
/// prototype of `with` by `entanglement`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CooccurrenceSpec {
    pub primary: String,
    pub with: String,
    pub probability: f64,
    #[serde(default)]
    pub entanglement: f64,
}

/// Low-rank structured noise shared across images. Direction `k` leans
/// towards the prototype of finding `k mod C` by `tilt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct NuisanceSpec {
    pub rank: usize,
    pub scale: f64,
    pub tilt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct SynthConfig {
    pub name: String,
    pub dim: usize,
    pub findings: Vec<FindingSpec>,
    pub cooccurrence: Vec<CooccurrenceSpec>,
    /// Per-coordinate standard deviation of isotropic image noise.
    pub noise: f64,
    pub nuisance: Option<NuisanceSpec>,
    /// Probability of flipping a train label off; negatives are flipped on
    /// at the rate that keeps the marginal unchanged. Test labels stay clean.
    pub label_noise: f64,
    pub text_noise: f64,
    pub templates: AnchorConfig,
    /// Extra positive templates, embedded with `complex_text_noise`.
    pub complex_templates: Vec<String>,
    pub complex_text_noise: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::entangled_ptx()
    }
}

fn finding(name: &str, prevalence: f64, dispersion_deg: f64) -> FindingSpec {
    FindingSpec { name: name.into(), prevalence, dispersion_deg }
}

fn cooc(primary: &str, with: &str, probability: f64, entanglement: f64) -> CooccurrenceSpec {
    CooccurrenceSpec { primary: primary.into(), with: with.into(), probability, entanglement }
}

impl SynthConfig {
    /// Rare target with one strongly entangled confounder and two weak ones.
    pub fn entangled_ptx() -> Self {
        Self {
            name: "entangled-ptx".into(),
            dim: 64,
            findings: vec![
                finding("pneumothorax", 0.02, 20.0),
                finding("atelectasis", 0.12, 20.0),
                finding("pleural effusion", 0.10, 20.0),
                finding("consolidation", 0.06, 20.0),
                finding("cardiomegaly", 0.10, 20.0),
                finding("edema", 0.08, 20.0),
            ],
            cooccurrence: vec![
                cooc("pneumothorax", "atelectasis", 0.5, 0.6),
                cooc("pneumothorax", "pleural effusion", 0.2, 0.2),
                cooc("pneumothorax", "consolidation", 0.15, 0.2),
                cooc("atelectasis", "pleural effusion", 0.1, 0.2),
                cooc("cardiomegaly", "edema", 0.1, 0.2),
            ],
            noise: 0.06,
            nuisance: Some(NuisanceSpec { rank: 6, scale: 0.6, tilt: 0.5 }),
            label_noise: 0.02,
            text_noise: 0.05,
            templates: AnchorConfig::default(),
            complex_templates: COMPLEX_TEMPLATES.iter().map(|t| t.to_string()).collect(),
            complex_text_noise: 0.4,
            n_train: 5000,
            n_test: 2000,
            seed: 0,
        }
    }

    pub fn finding_names(&self) -> Vec<String> {
        self.findings.iter().map(|f| f.name.clone()).collect()
    }

    /// Prompt templates under which the archive holds positive embeddings.
    pub fn all_positive_templates(&self) -> Vec<String> {
        let mut t = self.templates.positive_templates.clone();
        t.extend(self.complex_templates.iter().cloned());
        t
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::Config(m));
        if self.findings.is_empty() {
            return err("at least one finding is required".into());
        }
        let vocab = LabelVocabulary::new(self.finding_names())?;
        let rank = self.nuisance.as_ref().map_or(0, |n| n.rank);
        let needed = (self.findings.len() + 1 + rank).max(4);
        if self.dim < needed {
            return err(format!("dim {} is too small, need at least {needed}", self.dim));
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        for f in &self.findings {
            if !unit(f.prevalence) {
                return err(format!("prevalence of {:?} must lie in [0, 1]", f.name));
            }
            if !(0.0..=90.0).contains(&f.dispersion_deg) {
                return err(format!("dispersion of {:?} must lie in [0, 90] degrees", f.name));
            }
        }
        let mut pairs = std::collections::HashSet::new();
        for c in &self.cooccurrence {
            let (p, w) = (vocab.index_of(&c.primary)?, vocab.index_of(&c.with)?);
            if p == w {
                return err(format!("{:?} cannot co-occur with itself", c.primary));
            }
            if !pairs.insert((p, w)) {
                return err(format!("duplicate co-occurrence {:?} -> {:?}", c.primary, c.with));
            }
            if !unit(c.probability) || !unit(c.entanglement) {
                return err(format!("co-occurrence {:?} -> {:?} needs probabilities in [0, 1]", c.primary, c.with));
            }
        }
        for (what, v) in
            [("noise", self.noise), ("text_noise", self.text_noise), ("complex_text_noise", self.complex_text_noise)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{what} must be >= 0"));
            }
        }
        if !unit(self.label_noise) {
            return err("label_noise must lie in [0, 1]".into());
        }
        if let Some(n) = &self.nuisance {
            if !(n.scale >= 0.0 && n.scale.is_finite()) || !unit(n.tilt) {
                return err("nuisance needs scale >= 0 and tilt in [0, 1]".into());
            }
        }
        if self.templates.positive_templates.is_empty() || self.templates.negative_templates.is_empty() {
            return err("templates must not be empty".into());
        }
        if self.n_train + self.n_test == 0 {
            return err("no examples requested".into());
        }
        self.primary_probabilities()?;
        Ok(())
    }

    /// Directed co-occurrence probabilities as a dense `C × C` matrix.
    pub fn cooccurrence_matrix(&self) -> Vec<Vec<f64>> {
        let names = self.finding_names();
        let idx = |n: &str| names.iter().position(|x| x == n).expect("validated name");
        let mut m = vec![vec![0.0; names.len()]; names.len()];
        for c in &self.cooccurrence {
            m[idx(&c.primary)][idx(&c.with)] = c.probability;
        }
        m
    }

    fn entanglement_matrix(&self) -> Vec<Vec<f64>> {
        let names = self.finding_names();
        let idx = |n: &str| names.iter().position(|x| x == n).expect("validated name");
        let mut m = vec![vec![0.0; names.len()]; names.len()];
        for c in &self.cooccurrence {
            m[idx(&c.primary)][idx(&c.with)] = c.entanglement;
        }
        m
    }

    /// Solves `(I + Cᵀ) π = p` so that `P(label j) = π_j + Σ_k π_k C[k][j]`
    /// equals the configured prevalence.
    pub fn primary_probabilities(&self) -> Result<Vec<f64>, SynthError> {
        let n = self.findings.len();
        let c = self.cooccurrence_matrix();
        let a = nalgebra::DMatrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) + c[j][i]);
        let p = nalgebra::DVector::from_iterator(n, self.findings.iter().map(|f| f.prevalence));
        let pi = a.lu().solve(&p).ok_or_else(|| SynthError::Config("co-occurrence system is singular".into()))?;
        if pi.iter().any(|&x| x < -1e-12) {
            return Err(SynthError::Config(
                "prevalences are too low for the configured co-occurrence probabilities".into(),
            ));
        }
        let pi: Vec<f64> = pi.iter().map(|&x| x.max(0.0)).collect();
        if pi.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(SynthError::Config("primary probabilities sum above one".into()));
        }
        Ok(pi)
    }
}

/// Everything the generator drew, for tests and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SynthTruth {
    pub config: SynthConfig,
    /// Unit prototypes keyed by finding, in vocabulary order.
    pub prototypes: BTreeMap<String, Vec<f64>>,
    pub normal_prototype: Vec<f64>,
    pub nuisance_directions: Vec<Vec<f64>>,
    pub primary_probabilities: Vec<f64>,
}

impl SynthTruth {
    pub fn prototype(&self, finding: &str) -> Option<&[f64]> {
        self.prototypes.get(finding).map(Vec::as_slice)
    }
}

fn gaussian_vec(rng: &mut Rng, len: usize, sd: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

/// Rounds to `f32` so the in-memory copy matches a saved-then-loaded one.
fn to_storage(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| f64::from(x as f32)).collect()
}

fn unit_storage(v: &[f64]) -> Result<Vec<f64>, SynthError> {
    let v = l2_normalize(v).map_err(|e| SynthError::Config(format!("degenerate embedding: {e}")))?;
    Ok(to_storage(v))
}

/// Rotates `center` by `angle` radians towards a random orthogonal direction.
fn disperse(center: &[f64], angle: f64, rng: &mut Rng) -> Vec<f64> {
    if angle == 0.0 {
        return center.to_vec();
    }
    let mut w = gaussian_vec(rng, center.len(), 1.0);
    let c = crate::numerics::dot(&w, center);
    w.iter_mut().zip(center).for_each(|(x, &p)| *x -= c * p);
    let w = l2_normalize(&w).unwrap_or_else(|_| center.to_vec());
    center.iter().zip(&w).map(|(&p, &q)| angle.cos() * p + angle.sin() * q).collect()
}

struct Generator<'a> {
    config: &'a SynthConfig,
    prototypes: Vec<Vec<f64>>,
    normal: Vec<f64>,
    nuisance: Vec<Vec<f64>>,
    primary: Vec<f64>,
    cooc: Vec<Vec<f64>>,
    entangle: Vec<Vec<f64>>,
}

impl Generator<'_> {
    fn example(&self, index: usize) -> Result<LabeledExample, SynthError> {
        let cfg = self.config;
        let c = cfg.findings.len();
        let d = cfg.dim;
        let mut rng = seeded_rng(derive_seed(cfg.seed, EXAMPLE_STREAM + index as u64));

        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut primary = None;
        for (k, &p) in self.primary.iter().enumerate() {
            acc += p;
            if u < acc {
                primary = Some(k);
                break;
            }
        }
        let mut labels = vec![false; c];
        let mut pulled: Vec<(usize, f64)> = vec![];
        if let Some(k) = primary {
            labels[k] = true;
            for (j, label) in labels.iter_mut().enumerate() {
                if j != k && rng.random::<f64>() < self.cooc[k][j] {
                    *label = true;
                    pulled.push((j, self.entangle[k][j]));
                }
            }
        }

        let (center, angle) = match primary {
            Some(k) => (&self.prototypes[k], cfg.findings[k].dispersion_deg.to_radians()),
            None => (&self.normal, 0.0),
        };
        let mut base = disperse(center, angle, &mut rng);
        if !pulled.is_empty() {
            let rho = pulled.iter().map(|p| p.1).sum::<f64>() / pulled.len() as f64;
            let mut mix = vec![0.0; d];
            for &(j, _) in &pulled {
                mix.iter_mut().zip(&self.prototypes[j]).for_each(|(m, &p)| *m += p / pulled.len() as f64);
            }
            base.iter_mut().zip(&mix).for_each(|(b, &m)| *b = (1.0 - rho) * *b + rho * m);
        }
        let noise = gaussian_vec(&mut rng, d, cfg.noise);
        base.iter_mut().zip(&noise).for_each(|(b, &n)| *b += n);
        if let Some(nuisance) = &cfg.nuisance {
            for dir in &self.nuisance {
                let z: f64 = StandardNormal.sample(&mut rng);
                base.iter_mut().zip(dir).for_each(|(b, &u)| *b += nuisance.scale * z * u);
            }
        }

        let split = if index < cfg.n_train { Split::Train } else { Split::Test };
        if split == Split::Train && cfg.label_noise > 0.0 {
            for (j, l) in labels.iter_mut().enumerate() {
                let p = cfg.findings[j].prevalence;
                let flip = if *l {
                    cfg.label_noise
                } else if p < 1.0 {
                    (cfg.label_noise * p / (1.0 - p)).min(1.0)
                } else {
                    0.0
                };
                if rng.random::<f64>() < flip {
                    *l = !*l;
                }
            }
        }

        Ok(LabeledExample {
            id: format!("{}-{index:06}", if split == Split::Train { "tr" } else { "te" }),
            labels,
            teacher: unit_storage(&base)?,
            feature: None,
            split,
        })
    }
}

/// Deterministic in `config.seed`; each image uses its own derived stream.
pub fn generate(config: &SynthConfig) -> Result<(Dataset, TextArchive, SynthTruth), SynthError> {
    config.validate()?;
    let c = config.findings.len();
    let d = config.dim;
    let names = config.finding_names();

    let mut rng = seeded_rng(derive_seed(config.seed, PROTOTYPE_STREAM));
    let mut basis = random_orthonormal(c + 1, d, &[], &mut rng);
    let normal = basis.pop().expect("c + 1 vectors");
    let prototypes = basis;

    let mut nuisance = vec![];
    if let Some(shape) = &config.nuisance {
        let mut avoid = prototypes.clone();
        avoid.push(normal.clone());
        let mut rng = seeded_rng(derive_seed(config.seed, NUISANCE_STREAM));
        let free = random_orthonormal(shape.rank, d, &avoid, &mut rng);
        for (k, w) in free.iter().enumerate() {
            let p = &prototypes[k % c];
            let dir: Vec<f64> =
                p.iter().zip(w).map(|(&a, &b)| shape.tilt.sqrt() * a + (1.0 - shape.tilt).sqrt() * b).collect();
            nuisance.push(l2_normalize(&dir).expect("unit combination"));
        }
    }

    let generator = Generator {
        config,
        prototypes: prototypes.clone(),
        normal: normal.clone(),
        nuisance: nuisance.clone(),
        primary: config.primary_probabilities()?,
        cooc: config.cooccurrence_matrix(),
        entangle: config.entanglement_matrix(),
    };
    let examples = (0..config.n_train + config.n_test)
        .into_par_iter()
        .map(|i| generator.example(i))
        .collect::<Result<Vec<_>, _>>()?;
    let dataset = Dataset::new(LabelVocabulary::new(names.clone())?, d, None, examples)?;

    let mut rng = seeded_rng(derive_seed(config.seed, TEXT_STREAM));
    let mut prompts = vec![];
    let mut push = |prompts: &mut Vec<PromptEmbedding>, class: &str, role, template: &str, center: &[f64], sd: f64| {
        let noise = gaussian_vec(&mut rng, center.len(), sd);
        let v: Vec<f64> = center.iter().zip(&noise).map(|(&x, &n)| x + n).collect();
        unit_storage(&v).map(|embedding| {
            prompts.push(PromptEmbedding {
                prompt: fill_template(template, class),
                class: class.into(),
                role,
                embedding,
            })
        })
    };
    for (k, name) in names.iter().enumerate() {
        let p = &prototypes[k];
        let neg: Vec<f64> = p.iter().map(|x| -x).collect();
        let text_sd = config.text_noise / (d as f64).sqrt();
        for t in &config.templates.positive_templates {
            push(&mut prompts, name, PromptRole::Positive, t, p, text_sd)?;
        }
        for t in &config.complex_templates {
            push(&mut prompts, name, PromptRole::Positive, t, p, config.complex_text_noise / (d as f64).sqrt())?;
        }
        for t in &config.templates.negative_templates {
            push(&mut prompts, name, PromptRole::Negative, t, &neg, text_sd)?;
        }
    }
    let archive = TextArchive::new(names.clone(), d, prompts)?;

    let truth = SynthTruth {
        config: config.clone(),
        prototypes: names.iter().cloned().zip(prototypes).collect(),
        normal_prototype: normal,
        nuisance_directions: nuisance,
        primary_probabilities: generator.primary,
    };
    Ok((dataset, archive, truth))
}
