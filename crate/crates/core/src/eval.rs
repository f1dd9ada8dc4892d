//! Zero-shot scoring against positive/negative anchors, ROC AUC, the
//! fixed-sensitivity operating point and multi-run aggregation.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::AnchorSet;
use crate::data::{cooccurrence_table, DataError, Dataset, LabeledExample, Split};
use crate::model::{ModelError, StudentHead};
use crate::numerics::{dot, l2_normalize, NumericsError, Scalar};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least one positive and one negative, got {positives} and {negatives}")]
    DegenerateLabels { positives: usize, negatives: usize },
    #[error("no positive/negative anchor pair for {0:?}")]
    MissingAnchor(String),
    #[error("target sensitivity must lie in (0, 1], got {0}")]
    TargetSensitivity(f64),
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("score set columns disagree in length")]
    Length,
    #[error("split {0:?} has no examples")]
    EmptySplit(Split),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreMode {
    /// `cos(v, t_pos) − cos(v, t_neg)`
    #[default]
    Difference,
    /// Probability of the positive prompt under a two-way softmax of
    /// `cos / temperature`.
    Softmax { temperature: f64 },
}

pub fn zero_shot_score<T: Scalar>(embedding: &[T], positive: &[T], negative: &[T], mode: ScoreMode) -> T {
    let cp = dot(embedding, positive);
    let cn = dot(embedding, negative);
    match mode {
        ScoreMode::Difference => cp - cn,
        ScoreMode::Softmax { temperature } => {
            let z = (cp - cn) / T::lit(temperature);
            T::one() / (T::one() + (-z).exp())
        }
    }
}

/// Scores and binary labels for one finding.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet<T> {
    ids: Vec<String>,
    labels: Vec<bool>,
    scores: Vec<T>,
}

impl<T: Scalar> ScoreSet<T> {
    pub fn new(ids: Vec<String>, labels: Vec<bool>, scores: Vec<T>) -> Result<Self, EvalError> {
        if ids.len() != labels.len() || ids.len() != scores.len() {
            return Err(EvalError::Length);
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(EvalError::NonFiniteScore(i));
        }
        Ok(Self { ids, labels, scores })
    }

    /// Anonymous set, ids are the indices.
    pub fn from_pairs(labels: Vec<bool>, scores: Vec<T>) -> Result<Self, EvalError> {
        Self::new((0..labels.len()).map(|i| i.to_string()).collect(), labels, scores)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    fn require_both(&self) -> Result<(usize, usize), EvalError> {
        let (p, n) = (self.positives(), self.negatives());
        if p == 0 || n == 0 {
            return Err(EvalError::DegenerateLabels { positives: p, negatives: n });
        }
        Ok((p, n))
    }
}

fn by_score<T: Scalar>(a: &T, b: &T) -> Ordering {
    a.partial_cmp(b).expect("scores are finite")
}

/// Mann–Whitney AUC with midranks, so ties count one half.
pub fn roc_auc<T: Scalar>(set: &ScoreSet<T>) -> Result<f64, EvalError> {
    let (n_pos, n_neg) = set.require_both()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| by_score(&set.scores[a], &set.scores[b]));

    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| set.labels[k]).count();
        rank_sum += midrank * pos_in_group as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema, Default)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityRule {
    /// Largest threshold whose sensitivity is at least the target.
    #[default]
    AtLeast,
    /// Largest threshold whose achievable sensitivity is closest to the
    /// target, ties going to the higher sensitivity.
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub target_sensitivity: f64,
    pub rule: SensitivityRule,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl OperatingPoint {
    /// Metrics of the rule `score ≥ threshold`.
    pub fn at_threshold<T: Scalar>(set: &ScoreSet<T>, threshold: T, target: f64, rule: SensitivityRule) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&s, &l) in set.scores.iter().zip(&set.labels) {
            match (s >= threshold, l) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let sensitivity = ratio(tp, tp + fn_);
        let precision = ratio(tp, tp + fp);
        let f1 =
            if precision + sensitivity > 0.0 { 2.0 * precision * sensitivity / (precision + sensitivity) } else { 0.0 };
        Self {
            threshold: threshold.to_f64().expect("finite"),
            target_sensitivity: target,
            rule,
            sensitivity,
            specificity: ratio(tn, tn + fp),
            precision,
            f1,
            true_positives: tp,
            false_positives: fp,
            true_negatives: tn,
            false_negatives: fn_,
        }
    }
}

pub fn operating_point<T: Scalar>(
    set: &ScoreSet<T>,
    target_sensitivity: f64,
    rule: SensitivityRule,
) -> Result<OperatingPoint, EvalError> {
    if !(target_sensitivity > 0.0 && target_sensitivity <= 1.0) {
        return Err(EvalError::TargetSensitivity(target_sensitivity));
    }
    let n_pos = set.positives();
    if n_pos == 0 {
        return Err(EvalError::DegenerateLabels { positives: 0, negatives: set.negatives() });
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| by_score(&set.scores[b], &set.scores[a]));

    // Walk distinct scores from the top; sensitivity at γ = s counts every
    // positive scoring ≥ s.
    let mut levels: Vec<(T, f64)> = Vec::new();
    let mut tp = 0;
    let mut i = 0;
    while i < order.len() {
        let s = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == s {
            tp += usize::from(set.labels[order[i]]);
            i += 1;
        }
        levels.push((s, tp as f64 / n_pos as f64));
    }
    let chosen = match rule {
        SensitivityRule::AtLeast => levels.iter().find(|(_, sens)| *sens >= target_sensitivity).map(|l| l.0),
        SensitivityRule::Nearest => {
            let mut best: Option<(T, f64)> = None;
            for &(s, sens) in &levels {
                let gap = (sens - target_sensitivity).abs();
                match best {
                    Some((_, b)) if gap >= b => {}
                    _ => best = Some((s, gap)),
                }
            }
            best.map(|b| b.0)
        }
    }
    .expect("the lowest score reaches sensitivity 1");
    let point = OperatingPoint::at_threshold(set, chosen, target_sensitivity, rule);
    if point.sensitivity < target_sensitivity {
        log::warn!(
            "sensitivity {:.4} is below the requested {:.4} ({} positives)",
            point.sensitivity,
            target_sensitivity,
            n_pos
        );
    }
    Ok(point)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RunAggregate {
    pub runs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; absent for a single run.
    pub sd: Option<f64>,
    /// Normal-approximation 95% interval across runs.
    pub ci95: Option<[f64; 2]>,
}

/// `None` for an empty list.
pub fn aggregate_runs(values: &[f64]) -> Option<RunAggregate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (sd, ci95) = if values.len() >= 2 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        let half = 1.96 * sd / n.sqrt();
        (Some(sd), Some([mean - half, mean + half]))
    } else {
        (None, None)
    };
    Some(RunAggregate { runs: values.to_vec(), mean, sd, ci95 })
}

/// Source of the embedding scored against the anchors.
#[derive(Debug, Clone, Copy)]
pub enum Embedder<'a> {
    /// The frozen teacher embedding, normalized.
    Teacher,
    Student(&'a StudentHead<f64>),
}

impl Embedder<'_> {
    pub fn embed(&self, example: &LabeledExample) -> Result<Vec<f64>, EvalError> {
        match self {
            Embedder::Teacher => Ok(l2_normalize(&example.teacher)?),
            Embedder::Student(head) => Ok(head.embed(example.head_input())?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct EvalConfig {
    /// Findings to report; defaults to every anchor class.
    pub findings: Option<Vec<String>>,
    pub target_sensitivity: f64,
    pub sensitivity_rule: SensitivityRule,
    pub score_mode: ScoreMode,
    pub split: Split,
    /// How many most and least co-occurring backgrounds to flag.
    pub confounders: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            findings: None,
            target_sensitivity: 0.95,
            sensitivity_rule: SensitivityRule::AtLeast,
            score_mode: ScoreMode::Difference,
            split: Split::Test,
            confounders: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum FindingRole {
    Target,
    MostCooccurring,
    LeastCooccurring,
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FindingRow {
    pub finding: String,
    pub role: FindingRole,
    pub positives: usize,
    pub negatives: usize,
    /// Examples (all splits) carrying both this finding and the target.
    pub cooccurrence_with_target: Option<usize>,
    pub auc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EvalReport {
    pub split: Split,
    pub target: String,
    pub score_mode: ScoreMode,
    pub num_examples: usize,
    pub findings: Vec<FindingRow>,
    pub operating_point: Option<OperatingPoint>,
    pub operating_point_error: Option<String>,
}

impl EvalReport {
    pub fn finding(&self, name: &str) -> Option<&FindingRow> {
        self.findings.iter().find(|r| r.finding == name)
    }

    pub fn target_auc(&self) -> Option<f64> {
        self.finding(&self.target).and_then(|r| r.auc)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let width = self.findings.iter().map(|r| r.finding.len()).max().unwrap_or(0).max(7);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:<17}  {:>5}  {:>6}  {:>8}", "finding", "role", "pos", "neg", "AUC");
        for r in &self.findings {
            let auc = r.auc.map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"));
            let role = serde_json::to_value(r.role).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            let _ = writeln!(
                out,
                "{:<width$}  {:<17}  {:>5}  {:>6}  {:>8}",
                r.finding, role, r.positives, r.negatives, auc
            );
        }
        if let Some(op) = &self.operating_point {
            let _ = writeln!(
                out,
                "\n{} at γ = {:.4}: sensitivity {:.4}, specificity {:.4}, precision {:.4}, F1 {:.4} (tp {}, fp {}, tn {}, fn {})",
                self.target,
                op.threshold,
                op.sensitivity,
                op.specificity,
                op.precision,
                op.f1,
                op.true_positives,
                op.false_positives,
                op.true_negatives,
                op.false_negatives
            );
        }
        out
    }
}

fn embed_split<'a>(
    dataset: &'a Dataset,
    embedder: Embedder<'_>,
    split: Split,
) -> Result<(Vec<&'a LabeledExample>, Vec<Vec<f64>>), EvalError> {
    let examples: Vec<&LabeledExample> = dataset.in_split(split).collect();
    if examples.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    let embeddings = examples.par_iter().map(|ex| embedder.embed(ex)).collect::<Result<Vec<_>, _>>()?;
    Ok((examples, embeddings))
}

/// Scores one finding on precomputed embeddings.
pub fn score_finding(
    examples: &[&LabeledExample],
    embeddings: &[Vec<f64>],
    label_index: usize,
    pair: (&[f64], &[f64]),
    mode: ScoreMode,
) -> Result<ScoreSet<f64>, EvalError> {
    ScoreSet::new(
        examples.iter().map(|e| e.id.clone()).collect(),
        examples.iter().map(|e| e.labels[label_index]).collect(),
        embeddings.iter().map(|v| zero_shot_score(v, pair.0, pair.1, mode)).collect(),
    )
}

pub fn evaluate(
    dataset: &Dataset,
    embedder: Embedder<'_>,
    anchors: &AnchorSet,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if !(config.target_sensitivity > 0.0 && config.target_sensitivity <= 1.0) {
        return Err(EvalError::TargetSensitivity(config.target_sensitivity));
    }
    let vocab = dataset.vocabulary();
    let target = anchors.target().to_string();
    let findings: Vec<String> = match &config.findings {
        Some(list) => list.clone(),
        None => anchors.classes().to_vec(),
    };
    for f in findings.iter().chain(std::iter::once(&target)) {
        vocab.index_of(f)?;
    }

    let cooc = cooccurrence_table(vocab, dataset.examples(), &target)?;
    let ranked: Vec<(String, usize)> = cooc.ranked().into_iter().filter(|(name, _)| findings.contains(name)).collect();
    let k = config.confounders.min(ranked.len() / 2);
    let most: Vec<&str> = ranked[..k].iter().map(|(n, _)| n.as_str()).collect();
    let least: Vec<&str> = ranked[ranked.len() - k..].iter().map(|(n, _)| n.as_str()).collect();

    let (examples, embeddings) = embed_split(dataset, embedder, config.split)?;

    let mut rows = Vec::with_capacity(findings.len());
    let mut operating = None;
    let mut operating_error = None;
    for finding in &findings {
        let li = vocab.index_of(finding)?;
        let positives = examples.iter().filter(|e| e.labels[li]).count();
        let role = if *finding == target {
            FindingRole::Target
        } else if most.contains(&finding.as_str()) {
            FindingRole::MostCooccurring
        } else if least.contains(&finding.as_str()) {
            FindingRole::LeastCooccurring
        } else {
            FindingRole::Background
        };
        let mut row = FindingRow {
            finding: finding.clone(),
            role,
            positives,
            negatives: examples.len() - positives,
            cooccurrence_with_target: cooc.counts.iter().find(|(n, _)| n == finding).map(|c| c.1),
            auc: None,
            error: None,
        };
        let scored = anchors
            .pair(finding)
            .ok_or_else(|| EvalError::MissingAnchor(finding.clone()))
            .and_then(|pair| score_finding(&examples, &embeddings, li, pair, config.score_mode));
        match scored.and_then(|set| {
            let auc = roc_auc(&set);
            if *finding == target {
                match operating_point(&set, config.target_sensitivity, config.sensitivity_rule) {
                    Ok(op) => operating = Some(op),
                    Err(e) => operating_error = Some(e.to_string()),
                }
            }
            auc
        }) {
            Ok(auc) => row.auc = Some(auc),
            Err(e) => {
                log::warn!("{finding}: {e}");
                if *finding == target && operating_error.is_none() && operating.is_none() {
                    operating_error = Some(e.to_string());
                }
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
    }

    Ok(EvalReport {
        split: config.split,
        target,
        score_mode: config.score_mode,
        num_examples: examples.len(),
        findings: rows,
        operating_point: operating,
        operating_point_error: operating_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FindingAggregate {
    pub finding: String,
    pub auc: Option<RunAggregate>,
}

/// Per-finding AUC aggregates plus target operating-point aggregates over
/// several runs of the same evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct MultiRunReport {
    pub target: String,
    pub findings: Vec<FindingAggregate>,
    pub sensitivity: Option<RunAggregate>,
    pub specificity: Option<RunAggregate>,
    pub precision: Option<RunAggregate>,
    pub f1: Option<RunAggregate>,
    pub threshold: Option<RunAggregate>,
}

pub fn aggregate_reports(reports: &[EvalReport]) -> Option<MultiRunReport> {
    let first = reports.first()?;
    let findings = first
        .findings
        .iter()
        .map(|row| {
            let aucs: Vec<f64> = reports.iter().filter_map(|r| r.finding(&row.finding).and_then(|f| f.auc)).collect();
            FindingAggregate { finding: row.finding.clone(), auc: aggregate_runs(&aucs) }
        })
        .collect();
    let op = |f: fn(&OperatingPoint) -> f64| {
        let v: Vec<f64> = reports.iter().filter_map(|r| r.operating_point.as_ref().map(f)).collect();
        aggregate_runs(&v)
    };
    Some(MultiRunReport {
        target: first.target.clone(),
        findings,
        sensitivity: op(|o| o.sensitivity),
        specificity: op(|o| o.specificity),
        precision: op(|o| o.precision),
        f1: op(|o| o.f1),
        threshold: op(|o| o.threshold),
    })
}

/// Projection onto the top two principal axes; each axis is signed so its
/// largest-magnitude loading is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    if n == 0 {
        return vec![];
    }
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let col: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let pivot = col.iter().copied().fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            col.into_iter().map(|x| x * sign).collect()
        })
        .collect();
    (0..n)
        .map(|i| {
            let row: Vec<f64> = centered.row(i).iter().copied().collect();
            let mut out = [0.0; 2];
            for (o, axis) in out.iter_mut().zip(&axes) {
                *o = dot(&row, axis);
            }
            out
        })
        .collect()
}

/// Writes `id,label,pc1,pc2,e0..e{d-1}` for one split.
pub fn dump_embeddings(
    dataset: &Dataset,
    embedder: Embedder<'_>,
    finding: &str,
    split: Split,
    path: &Path,
) -> Result<usize, EvalError> {
    let li = dataset.vocabulary().index_of(finding)?;
    let (examples, embeddings) = embed_split(dataset, embedder, split)?;
    let projected = pca_2d(&embeddings);
    let io = |e: std::io::Error| EvalError::Io { path: path.display().to_string(), source: e };
    let mut out = String::new();
    out.push_str("id,label,pc1,pc2");
    for j in 0..dataset.dim() {
        let _ = write!(out, ",e{j}");
    }
    out.push('\n');
    for ((ex, v), p) in examples.iter().zip(&embeddings).zip(&projected) {
        let _ = write!(out, "{},{},{},{}", ex.id, u8::from(ex.labels[li]), p[0], p[1]);
        for x in v {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, out).map_err(io)?;
    Ok(examples.len())
}
