//! Dataset schema, label vocabulary and the `PCLIPF32` feature archive.
//!
//! An archive is a directory:
//!
//! * `manifest.json`: format tag, version, kind, dims, count, vocabulary and
//!   the ordered example ids (with split for image archives).
//! * `labels.csv` (image archives): `id` then one 0/1 column per finding, in
//!   vocabulary order.
//! * `prompts.csv` (prompt archives): `prompt,class,role`.
//! * `teacher.f32` and optional `features.f32`: the 8-byte magic `PCLIPF32`
//!   followed by row-major little-endian `f32` values, one row per id in
//!   manifest order.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{check_finite, norm};

pub const MAGIC: &[u8; 8] = b"PCLIPF32";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.csv";
pub const PROMPTS_FILE: &str = "prompts.csv";
pub const TEACHER_FILE: &str = "teacher.f32";
pub const FEATURES_FILE: &str = "features.f32";

/// Teacher rows whose norm is outside this band are rejected on load.
pub const TEACHER_NORM_BAND: (f64, f64) = (0.99, 1.01);
/// Rows within this distance of unit norm are kept exactly as stored;
/// `f32` rounding of a unit vector never exceeds it.
const RENORMALIZE_SLACK: f64 = 1.0 / (1u64 << 20) as f64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("format error: {0}")]
    Format(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
}

impl DataError {
    fn io(path: &Path, source: io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }
}

/// Ordered finding names. The order is the class axis everywhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, DataError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(DataError::Vocabulary(format!("empty finding name at position {i}")));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(DataError::Vocabulary(format!("duplicate finding {name:?}")));
            }
        }
        Ok(Self { names, index })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize, DataError> {
        self.index.get(name).copied().ok_or_else(|| DataError::UnknownLabel(name.to_string()))
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One image: multi-hot labels, frozen teacher embedding and optional
/// frozen backbone features.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub id: String,
    pub labels: Vec<bool>,
    pub teacher: Vec<f64>,
    pub feature: Option<Vec<f64>>,
    pub split: Split,
}

impl LabeledExample {
    /// The vector fed to the student head: the backbone feature when
    /// present, otherwise the teacher embedding itself.
    pub fn head_input(&self) -> &[f64] {
        self.feature.as_deref().unwrap_or(&self.teacher)
    }

    pub fn has_no_finding(&self) -> bool {
        !self.labels.iter().any(|&l| l)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    vocabulary: LabelVocabulary,
    examples: Vec<LabeledExample>,
    dim: usize,
    feature_dim: Option<usize>,
    by_id: HashMap<String, usize>,
}

impl Dataset {
    /// Validates shapes and id uniqueness.
    pub fn new(
        vocabulary: LabelVocabulary,
        dim: usize,
        feature_dim: Option<usize>,
        examples: Vec<LabeledExample>,
    ) -> Result<Self, DataError> {
        let mut by_id = HashMap::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            if by_id.insert(ex.id.clone(), i).is_some() {
                return Err(DataError::DuplicateId(ex.id.clone()));
            }
            if ex.labels.len() != vocabulary.len() {
                return Err(DataError::DimMismatch(format!(
                    "example {:?} has {} labels, vocabulary has {}",
                    ex.id,
                    ex.labels.len(),
                    vocabulary.len()
                )));
            }
            if ex.teacher.len() != dim {
                return Err(DataError::DimMismatch(format!(
                    "example {:?} teacher dim {} != {dim}",
                    ex.id,
                    ex.teacher.len()
                )));
            }
            check_finite(&ex.teacher)
                .map_err(|_| DataError::Format(format!("non-finite teacher embedding for {:?}", ex.id)))?;
            match (&ex.feature, feature_dim) {
                (None, None) => {}
                (Some(f), Some(fd)) if f.len() == fd => {
                    check_finite(f).map_err(|_| DataError::Format(format!("non-finite feature for {:?}", ex.id)))?;
                }
                _ => {
                    return Err(DataError::DimMismatch(format!(
                        "example {:?} feature does not match feature dim {feature_dim:?}",
                        ex.id
                    )))
                }
            }
        }
        Ok(Self { vocabulary, examples, dim, feature_dim, by_id })
    }

    pub fn vocabulary(&self) -> &LabelVocabulary {
        &self.vocabulary
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Teacher embedding dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.feature_dim
    }

    /// Dimension of the student head input.
    pub fn input_dim(&self) -> usize {
        self.feature_dim.unwrap_or(self.dim)
    }

    pub fn get(&self, id: &str) -> Option<&LabeledExample> {
        self.by_id.get(id).map(|&i| &self.examples[i])
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &LabeledExample> + '_ {
        self.examples.iter().filter(move |e| e.split == split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum ArchiveKind {
    Images,
    Prompts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: ArchiveKind,
    pub d: usize,
    pub d_in: Option<usize>,
    pub count: usize,
    pub vocabulary: Vec<String>,
    pub examples: Vec<ManifestEntry>,
}

impl Manifest {
    fn validate(&self, kind: ArchiveKind) -> Result<(), DataError> {
        if self.format != "PCLIPF32" {
            return Err(DataError::Format(format!("unexpected format tag {:?}", self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(DataError::Format(format!("unsupported version {}", self.version)));
        }
        if self.kind != kind {
            return Err(DataError::Format(format!("expected a {kind:?} archive, found {:?}", self.kind)));
        }
        if self.count != self.examples.len() {
            return Err(DataError::DimMismatch(format!(
                "manifest count {} but {} ids listed",
                self.count,
                self.examples.len()
            )));
        }
        if self.d == 0 && self.count > 0 {
            return Err(DataError::Format("embedding dim d must be positive".into()));
        }
        Ok(())
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::Format(format!("{}: {e}", path.display())))
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), DataError> {
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| DataError::io(&path, e))
}

/// Writes rows as a `PCLIPF32` matrix file.
pub fn write_f32_rows<'a>(path: &Path, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<(), DataError> {
    let mut buf = Vec::from(&MAGIC[..]);
    for row in rows {
        for &x in row {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    file.write_all(&buf).map_err(|e| DataError::io(path, e))
}

/// Reads a `PCLIPF32` matrix file with `expected_rows` rows of width `dim`,
/// promoting to `f64`.
pub fn read_f32_rows(path: &Path, expected_rows: usize, dim: usize) -> Result<Vec<Vec<f64>>, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(DataError::Format(format!("{}: missing PCLIPF32 magic", path.display())));
    }
    let payload = &bytes[MAGIC.len()..];
    let row_bytes = dim * 4;
    if payload.len() % 4 != 0 || (row_bytes > 0 && payload.len() % row_bytes != 0) {
        return Err(DataError::Format(format!(
            "{}: payload of {} bytes is not a whole number of {dim}-wide rows (truncated?)",
            path.display(),
            payload.len()
        )));
    }
    let rows_present = payload.len().checked_div(row_bytes).unwrap_or(expected_rows);
    if rows_present != expected_rows {
        return Err(DataError::DimMismatch(format!(
            "{}: manifest lists {expected_rows} rows, file holds {rows_present}",
            path.display()
        )));
    }
    let values: Vec<f64> =
        payload.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
    if let Some(i) = values.iter().position(|x| !x.is_finite()) {
        return Err(DataError::Format(format!("{}: non-finite value at element {i}", path.display())));
    }
    Ok(values.chunks(dim.max(1)).take(expected_rows).map(<[f64]>::to_vec).collect())
}

/// Brings a stored unit vector back to unit norm, or rejects it when it is
/// too far off to be storage drift.
pub fn renormalize_stored(row: &mut [f64], what: &str) -> Result<(), DataError> {
    let n = norm(row);
    if !(TEACHER_NORM_BAND.0..=TEACHER_NORM_BAND.1).contains(&n) {
        return Err(DataError::Format(format!("{what}: embedding norm {n} outside [0.99, 1.01]")));
    }
    if (n - 1.0).abs() > RENORMALIZE_SLACK {
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(())
}

pub fn load_archive(dir: &Path) -> Result<Dataset, DataError> {
    let manifest = read_manifest(dir)?;
    manifest.validate(ArchiveKind::Images)?;
    let vocabulary = LabelVocabulary::new(manifest.vocabulary.clone())?;

    let labels = read_labels(&dir.join(LABELS_FILE), &manifest)?;
    let mut teachers = read_f32_rows(&dir.join(TEACHER_FILE), manifest.count, manifest.d)?;
    let features_path = dir.join(FEATURES_FILE);
    let features = match manifest.d_in {
        Some(d_in) => Some(read_f32_rows(&features_path, manifest.count, d_in)?),
        None if features_path.exists() => {
            return Err(DataError::Format("features.f32 present but manifest d_in is null".into()))
        }
        None => None,
    };

    let mut examples = Vec::with_capacity(manifest.count);
    for (i, entry) in manifest.examples.iter().enumerate() {
        let mut teacher = std::mem::take(&mut teachers[i]);
        renormalize_stored(&mut teacher, &entry.id)?;
        let split = entry.split.ok_or_else(|| DataError::Format(format!("missing split for {:?}", entry.id)))?;
        examples.push(LabeledExample {
            id: entry.id.clone(),
            labels: labels[i].clone(),
            teacher,
            feature: features.as_ref().map(|f| f[i].clone()),
            split,
        });
    }
    Dataset::new(vocabulary, manifest.d, manifest.d_in, examples)
}

fn read_labels(path: &Path, manifest: &Manifest) -> Result<Vec<Vec<bool>>, DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let expected: Vec<&str> = std::iter::once("id").chain(manifest.vocabulary.iter().map(String::as_str)).collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(DataError::Format(format!("{}: header does not match manifest vocabulary order", path.display())));
    }
    let mut rows = Vec::with_capacity(manifest.count);
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let Some(entry) = manifest.examples.get(i) else {
            return Err(DataError::DimMismatch(format!(
                "{}: more label rows than manifest count {}",
                path.display(),
                manifest.count
            )));
        };
        if &record[0] != entry.id.as_str() {
            return Err(DataError::Format(format!(
                "{}: row {i} id {:?} does not match manifest id {:?}",
                path.display(),
                &record[0],
                entry.id
            )));
        }
        let bits = record
            .iter()
            .skip(1)
            .map(|cell| match cell.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(DataError::Format(format!("{}: label cell {other:?} is not 0/1", path.display()))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(bits);
    }
    if rows.len() != manifest.count {
        return Err(DataError::DimMismatch(format!(
            "{}: {} label rows, manifest count {}",
            path.display(),
            rows.len(),
            manifest.count
        )));
    }
    Ok(rows)
}

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    DataError::Format(format!("{}: {e}", path.display()))
}

pub fn save_archive(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let manifest = Manifest {
        format: "PCLIPF32".into(),
        version: FORMAT_VERSION,
        kind: ArchiveKind::Images,
        d: dataset.dim(),
        d_in: dataset.feature_dim(),
        count: dataset.len(),
        vocabulary: dataset.vocabulary().names().to_vec(),
        examples: dataset.examples().iter().map(|e| ManifestEntry { id: e.id.clone(), split: Some(e.split) }).collect(),
    };
    write_manifest(dir, &manifest)?;

    let labels_path = dir.join(LABELS_FILE);
    let mut writer = csv::Writer::from_path(&labels_path).map_err(|e| csv_err(&labels_path, e))?;
    let header: Vec<&str> = std::iter::once("id").chain(manifest.vocabulary.iter().map(String::as_str)).collect();
    writer.write_record(&header).map_err(|e| csv_err(&labels_path, e))?;
    for ex in dataset.examples() {
        let row = std::iter::once(ex.id.as_str()).chain(ex.labels.iter().map(|&b| if b { "1" } else { "0" }));
        writer.write_record(row).map_err(|e| csv_err(&labels_path, e))?;
    }
    writer.flush().map_err(|e| DataError::io(&labels_path, e))?;

    write_f32_rows(&dir.join(TEACHER_FILE), dataset.examples().iter().map(|e| e.teacher.as_slice()))?;
    let features_path = dir.join(FEATURES_FILE);
    if dataset.feature_dim().is_some() {
        write_f32_rows(&features_path, dataset.examples().iter().map(|e| e.feature.as_deref().unwrap_or(&[])))?;
    } else if features_path.exists() {
        fs::remove_file(&features_path).map_err(|e| DataError::io(&features_path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum PromptRole {
    Positive,
    Negative,
}

impl PromptRole {
    fn as_str(self) -> &'static str {
        match self {
            PromptRole::Positive => "positive",
            PromptRole::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub prompt: String,
    pub class: String,
    pub role: PromptRole,
    pub embedding: Vec<f64>,
}

/// Frozen text-encoder outputs keyed by prompt string.
#[derive(Debug, Clone, PartialEq)]
pub struct TextArchive {
    classes: Vec<String>,
    dim: usize,
    prompts: Vec<PromptEmbedding>,
}

impl TextArchive {
    pub fn new(classes: Vec<String>, dim: usize, prompts: Vec<PromptEmbedding>) -> Result<Self, DataError> {
        LabelVocabulary::new(classes.clone())?;
        let mut seen = HashSet::new();
        for p in &prompts {
            if !seen.insert(p.prompt.as_str()) {
                return Err(DataError::DuplicateId(p.prompt.clone()));
            }
            if !classes.contains(&p.class) {
                return Err(DataError::UnknownLabel(p.class.clone()));
            }
            if p.embedding.len() != dim {
                return Err(DataError::DimMismatch(format!(
                    "prompt {:?} has dim {}, archive dim {dim}",
                    p.prompt,
                    p.embedding.len()
                )));
            }
        }
        Ok(Self { classes, dim, prompts })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prompts(&self) -> &[PromptEmbedding] {
        &self.prompts
    }

    pub fn find(&self, class: &str, role: PromptRole, prompt: &str) -> Option<&PromptEmbedding> {
        self.prompts.iter().find(|p| p.prompt == prompt && p.class == class && p.role == role)
    }
}

pub fn save_text_archive(archive: &TextArchive, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let manifest = Manifest {
        format: "PCLIPF32".into(),
        version: FORMAT_VERSION,
        kind: ArchiveKind::Prompts,
        d: archive.dim,
        d_in: None,
        count: archive.prompts.len(),
        vocabulary: archive.classes.clone(),
        examples: archive.prompts.iter().map(|p| ManifestEntry { id: p.prompt.clone(), split: None }).collect(),
    };
    write_manifest(dir, &manifest)?;
    let path = dir.join(PROMPTS_FILE);
    let mut writer = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    writer.write_record(["prompt", "class", "role"]).map_err(|e| csv_err(&path, e))?;
    for p in &archive.prompts {
        writer.write_record([p.prompt.as_str(), p.class.as_str(), p.role.as_str()]).map_err(|e| csv_err(&path, e))?;
    }
    writer.flush().map_err(|e| DataError::io(&path, e))?;
    write_f32_rows(&dir.join(TEACHER_FILE), archive.prompts.iter().map(|p| p.embedding.as_slice()))
}

pub fn load_text_archive(dir: &Path) -> Result<TextArchive, DataError> {
    let manifest = read_manifest(dir)?;
    manifest.validate(ArchiveKind::Prompts)?;
    let rows = read_f32_rows(&dir.join(TEACHER_FILE), manifest.count, manifest.d)?;

    let path = dir.join(PROMPTS_FILE);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let header = reader.headers().map_err(|e| csv_err(&path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["prompt", "class", "role"] {
        return Err(DataError::Format(format!("{}: expected header prompt,class,role", path.display())));
    }
    let mut prompts = Vec::with_capacity(manifest.count);
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(&path, e))?;
        let entry = manifest
            .examples
            .get(i)
            .ok_or_else(|| DataError::DimMismatch(format!("{}: more rows than manifest count", path.display())))?;
        if record[0] != entry.id {
            return Err(DataError::Format(format!(
                "{}: row {i} prompt {:?} does not match manifest id {:?}",
                path.display(),
                &record[0],
                entry.id
            )));
        }
        let role = match &record[2] {
            "positive" => PromptRole::Positive,
            "negative" => PromptRole::Negative,
            other => return Err(DataError::Format(format!("{}: unknown role {other:?}", path.display()))),
        };
        let mut embedding = rows[i].clone();
        renormalize_stored(&mut embedding, &entry.id)?;
        prompts.push(PromptEmbedding { prompt: record[0].to_string(), class: record[1].to_string(), role, embedding });
    }
    if prompts.len() != manifest.count {
        return Err(DataError::DimMismatch(format!(
            "{}: {} rows, manifest count {}",
            path.display(),
            prompts.len(),
            manifest.count
        )));
    }
    TextArchive::new(manifest.vocabulary, manifest.d, prompts)
}

/// Counts of target-positive examples that also carry each other finding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CooccurrenceRow {
    pub target: String,
    pub target_count: usize,
    pub counts: Vec<(String, usize)>,
}

impl CooccurrenceRow {
    /// Background findings sorted by descending co-occurrence (ties keep
    /// vocabulary order).
    pub fn ranked(&self) -> Vec<(String, usize)> {
        let mut ranked = self.counts.clone();
        ranked.sort_by_key(|r| std::cmp::Reverse(r.1));
        ranked
    }
}

pub fn cooccurrence_table<'a>(
    vocabulary: &LabelVocabulary,
    examples: impl IntoIterator<Item = &'a LabeledExample>,
    target: &str,
) -> Result<CooccurrenceRow, DataError> {
    let t = vocabulary.index_of(target)?;
    let matrix = cooccurrence_matrix(vocabulary, examples);
    let counts =
        (0..vocabulary.len()).filter(|&b| b != t).map(|b| (vocabulary.name(b).to_string(), matrix[t][b])).collect();
    Ok(CooccurrenceRow { target: target.to_string(), target_count: matrix[t][t], counts })
}

/// Symmetric pairwise co-occurrence counts; the diagonal holds prevalence.
pub fn cooccurrence_matrix<'a>(
    vocabulary: &LabelVocabulary,
    examples: impl IntoIterator<Item = &'a LabeledExample>,
) -> Vec<Vec<usize>> {
    let n = vocabulary.len();
    let mut m = vec![vec![0usize; n]; n];
    for ex in examples {
        let present: Vec<usize> = ex.labels.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| i).collect();
        for &a in &present {
            for &b in &present {
                m[a][b] += 1;
            }
        }
    }
    m
}
