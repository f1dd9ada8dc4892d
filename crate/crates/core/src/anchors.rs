//! Frozen class anchors built from per-template text embeddings.

use std::fs;
use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{read_f32_rows, write_f32_rows, DataError, PromptRole, TextArchive};
use crate::numerics::{l2_normalize, norm, Scalar};

pub const PATHOLOGY_PLACEHOLDER: &str = "{pathology}";
const ANCHORS_MANIFEST: &str = "anchors.json";
const POSITIVE_FILE: &str = "anchors.f32";
const NEGATIVE_FILE: &str = "negatives.f32";
/// Template means at or below this norm are treated as cancelled out.
const MEAN_NORM_EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("empty template list")]
    EmptyTemplateList,
    #[error("template embeddings cancel out")]
    ZeroNorm,
    #[error("template embeddings disagree in dimension")]
    DimMismatch,
    #[error("missing prompt for class {class:?}, template {template} ({prompt:?})")]
    MissingPrompt { class: String, template: usize, prompt: String },
    #[error("invalid anchor request: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Longer phrasings used by the multi-template anchor variant.
pub const COMPLEX_TEMPLATES: [&str; 2] = ["findings consistent with {pathology}", "radiograph shows {pathology}"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct AnchorConfig {
    pub positive_templates: Vec<String>,
    pub negative_templates: Vec<String>,
}

impl AnchorConfig {
    /// Default templates followed by the complex ones.
    pub fn with_complex_templates() -> Self {
        let mut config = Self::default();
        config.positive_templates.extend(COMPLEX_TEMPLATES.iter().map(|t| t.to_string()));
        config
    }
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            positive_templates: vec!["{pathology}".into(), "indicating {pathology}".into()],
            negative_templates: vec!["no {pathology}".into(), "no indication of {pathology}".into()],
        }
    }
}

pub fn fill_template(template: &str, pathology: &str) -> String {
    template.replace(PATHOLOGY_PLACEHOLDER, pathology)
}

/// The normalized arithmetic mean of unit template embeddings.
pub fn build_anchor<T: Scalar>(templates: &[Vec<T>]) -> Result<Vec<T>, AnchorError> {
    let first = templates.first().ok_or(AnchorError::EmptyTemplateList)?;
    let dim = first.len();
    let mut mean = vec![T::zero(); dim];
    for t in templates {
        if t.len() != dim {
            return Err(AnchorError::DimMismatch);
        }
        for (m, &x) in mean.iter_mut().zip(t) {
            *m += x;
        }
    }
    let count = T::from_usize(templates.len()).expect("template count fits");
    mean.iter_mut().for_each(|m| *m /= count);
    if norm(&mean) <= T::lit(MEAN_NORM_EPS) {
        return Err(AnchorError::ZeroNorm);
    }
    l2_normalize(&mean).map_err(|_| AnchorError::ZeroNorm)
}

/// Unit anchors on the curation bucket axis plus negative anchors used at
/// inference. Fields are private so nothing downstream can mutate them.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    classes: Vec<String>,
    anchors: Vec<Vec<f64>>,
    negatives: Vec<Option<Vec<f64>>>,
    config: AnchorConfig,
}

impl AnchorSet {
    pub fn new(
        classes: Vec<String>,
        anchors: Vec<Vec<f64>>,
        negatives: Vec<Option<Vec<f64>>>,
        config: AnchorConfig,
    ) -> Result<Self, AnchorError> {
        if classes.is_empty() || classes.len() != anchors.len() || classes.len() != negatives.len() {
            return Err(AnchorError::Config("class, anchor and negative counts must agree".into()));
        }
        if negatives[0].is_none() {
            return Err(AnchorError::Config(format!("target {:?} needs a negative anchor", classes[0])));
        }
        let dim = anchors[0].len();
        let mut normalize = |v: &Vec<f64>| -> Result<Vec<f64>, AnchorError> {
            if v.len() != dim {
                return Err(AnchorError::DimMismatch);
            }
            l2_normalize(v).map_err(|_| AnchorError::ZeroNorm)
        };
        let anchors = anchors.iter().map(&mut normalize).collect::<Result<Vec<_>, _>>()?;
        let negatives =
            negatives.iter().map(|n| n.as_ref().map(&mut normalize).transpose()).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { classes, anchors, negatives, config })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn target(&self) -> &str {
        &self.classes[0]
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.anchors[0].len()
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    pub fn config(&self) -> &AnchorConfig {
        &self.config
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    /// `(t_pos, t_neg)` for a class, when a negative anchor exists.
    pub fn pair(&self, class: &str) -> Option<(&[f64], &[f64])> {
        let i = self.class_index(class)?;
        let neg = self.negatives[i].as_deref()?;
        Some((&self.anchors[i], neg))
    }

    pub fn save(&self, dir: &Path) -> Result<(), AnchorError> {
        fs::create_dir_all(dir).map_err(|e| DataError::Io { path: dir.into(), source: e })?;
        let manifest = AnchorManifest {
            format: "PCLIPF32".into(),
            version: crate::data::FORMAT_VERSION,
            kind: "anchors".into(),
            d: self.dim(),
            classes: self.classes.clone(),
            has_negative: self.negatives.iter().map(Option::is_some).collect(),
            templates: self.config.clone(),
        };
        let path = dir.join(ANCHORS_MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest).expect("anchor manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| DataError::Io { path, source: e })?;
        write_f32_rows(&dir.join(POSITIVE_FILE), self.anchors.iter().map(Vec::as_slice))?;
        write_f32_rows(&dir.join(NEGATIVE_FILE), self.negatives.iter().flatten().map(Vec::as_slice))?;
        Ok(())
    }

    /// Loads a saved set; stored rows are renormalized in `f64`.
    pub fn load(dir: &Path) -> Result<Self, AnchorError> {
        let path = dir.join(ANCHORS_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| DataError::Io { path: path.clone(), source: e })?;
        let m: AnchorManifest =
            serde_json::from_str(&text).map_err(|e| DataError::Format(format!("{}: {e}", path.display())))?;
        if m.kind != "anchors" || m.has_negative.len() != m.classes.len() {
            return Err(DataError::Format(format!("{}: not an anchor manifest", path.display())).into());
        }
        let anchors = read_f32_rows(&dir.join(POSITIVE_FILE), m.classes.len(), m.d)?;
        let n_neg = m.has_negative.iter().filter(|&&b| b).count();
        let mut neg_rows = read_f32_rows(&dir.join(NEGATIVE_FILE), n_neg, m.d)?.into_iter();
        let negatives = m.has_negative.iter().map(|&has| if has { neg_rows.next() } else { None }).collect();
        Self::new(m.classes, anchors, negatives, m.templates)
    }
}

#[derive(Debug, Serialize, Deserialize, JsonSchema)]
pub struct AnchorManifest {
    format: String,
    version: u32,
    kind: String,
    d: usize,
    classes: Vec<String>,
    has_negative: Vec<bool>,
    templates: AnchorConfig,
}

fn collect_templates(
    archive: &TextArchive,
    class: &str,
    role: PromptRole,
    templates: &[String],
) -> Result<Vec<Vec<f64>>, AnchorError> {
    templates
        .iter()
        .enumerate()
        .map(|(i, template)| {
            let prompt = fill_template(template, class);
            archive.find(class, role, &prompt).map(|p| p.embedding.clone()).ok_or_else(|| AnchorError::MissingPrompt {
                class: class.to_string(),
                template: i + 1,
                prompt,
            })
        })
        .collect()
}

/// Builds one anchor per class on `classes` (target first). The target must
/// have every negative template; other classes get a negative anchor only
/// when the archive holds all of theirs.
pub fn build_anchor_set(
    archive: &TextArchive,
    classes: &[String],
    config: &AnchorConfig,
) -> Result<AnchorSet, AnchorError> {
    if classes.is_empty() {
        return Err(AnchorError::Config("no classes requested".into()));
    }
    if config.positive_templates.is_empty() || config.negative_templates.is_empty() {
        return Err(AnchorError::EmptyTemplateList);
    }
    let mut anchors = Vec::with_capacity(classes.len());
    let mut negatives = Vec::with_capacity(classes.len());
    for (i, class) in classes.iter().enumerate() {
        let pos = collect_templates(archive, class, PromptRole::Positive, &config.positive_templates)?;
        anchors.push(build_anchor(&pos)?);
        let neg = match collect_templates(archive, class, PromptRole::Negative, &config.negative_templates) {
            Ok(rows) => Some(build_anchor(&rows)?),
            Err(e) if i == 0 => return Err(e),
            Err(_) => None,
        };
        negatives.push(neg);
    }
    AnchorSet::new(classes.to_vec(), anchors, negatives, config.clone())
}
