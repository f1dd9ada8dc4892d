//! End-to-end runs: curate, build anchors, fit every seed, evaluate, and the
//! hyperparameter ablation grid.

use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::anchors::{build_anchor_set, AnchorConfig, AnchorSet};
use crate::curation::{curate, CuratedDataset, CurationConfig};
use crate::data::{Dataset, TextArchive};
use crate::eval::{
    aggregate_reports, aggregate_runs, evaluate, Embedder, EvalConfig, EvalReport, MultiRunReport, RunAggregate,
};
use crate::loss::LossBreakdown;
use crate::train::{run_multi_seed, TrainConfig};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub curation: CurationConfig,
    pub anchors: AnchorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Replaces every seed: curation uses `seed`, training uses
    /// `seed..seed + n` for the configured number of runs.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.curation.seed = seed;
        let n = self.train.seeds.len().max(1) as u64;
        self.train.seeds = (seed..seed + n).collect();
        self
    }
}

/// Curation plus anchors aligned on the same class axis.
pub fn prepare(
    dataset: &Dataset,
    text: &TextArchive,
    curation: &CurationConfig,
    anchors: &AnchorConfig,
) -> Result<(CuratedDataset, AnchorSet), Error> {
    let curated = curate(dataset, curation)?;
    let anchor_set = build_anchor_set(text, &curated.classes, anchors)?;
    Ok((curated, anchor_set))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SeedResult {
    pub seed: u64,
    pub steps: usize,
    pub final_losses: LossBreakdown,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub baseline: EvalReport,
    pub runs: Vec<SeedResult>,
    pub aggregate: Option<MultiRunReport>,
}

impl ExperimentReport {
    pub fn refined_target_aucs(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.report.target_auc()).collect()
    }

    pub fn auc_gain(&self) -> Option<f64> {
        let refined = aggregate_runs(&self.refined_target_aucs())?;
        Some(refined.mean - self.baseline.target_auc()?)
    }
}

/// Trains one head per seed and evaluates it next to the frozen teacher.
pub fn run_experiment(
    dataset: &Dataset,
    text: &TextArchive,
    config: &ExperimentConfig,
) -> Result<ExperimentReport, Error> {
    let (curated, anchors) = prepare(dataset, text, &config.curation, &config.anchors)?;
    let baseline = evaluate(dataset, Embedder::Teacher, &anchors, &config.eval)?;
    let fits = run_multi_seed(dataset, &curated, &anchors, &config.train)?;
    let runs = fits
        .par_iter()
        .map(|run| {
            let report = evaluate(dataset, Embedder::Student(&run.head), &anchors, &config.eval)?;
            Ok(SeedResult { seed: run.seed, steps: run.log.total_steps(), final_losses: run.log.final_losses, report })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
    Ok(ExperimentReport { config: config.clone(), baseline, aggregate: aggregate_reports(&reports), runs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TemplateVariant {
    pub name: String,
    pub anchors: AnchorConfig,
}

/// Settings swept one at a time around the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct AblationGrid {
    pub distill_weights: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub template_variants: Vec<TemplateVariant>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            distill_weights: vec![0.0, 1.0, 10.0],
            batch_sizes: vec![64, 128, 256],
            template_variants: vec![TemplateVariant {
                name: "complex templates".into(),
                anchors: AnchorConfig::with_complex_templates(),
            }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AblationSetting {
    pub distill_weight: f64,
    pub batch_size: usize,
    pub templates: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AblationRow {
    pub label: String,
    pub setting: AblationSetting,
    pub target_auc: Option<RunAggregate>,
    pub final_distillation: Option<RunAggregate>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AblationReport {
    pub base: ExperimentConfig,
    pub grid: AblationGrid,
    pub baseline_target_auc: Option<f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
        let mut out = format!("{:<width$}  {:>8}  {:>8}  {:>10}\n", "setting", "AUC", "SD", "L_dist");
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>8}  {:>8}  {:>10}\n",
                r.label,
                fmt(r.target_auc.as_ref().map(|a| a.mean)),
                fmt(r.target_auc.as_ref().and_then(|a| a.sd)),
                fmt(r.final_distillation.as_ref().map(|a| a.mean)),
            ));
        }
        out
    }
}

fn base_templates_name() -> String {
    "default templates".into()
}

/// Row labels and settings in table order; the base point can appear under
/// several labels but is fitted once.
pub fn ablation_settings(base: &ExperimentConfig, grid: &AblationGrid) -> Vec<(String, AblationSetting)> {
    let b = base.train.batch_size;
    let lambda = base.train.loss.distill_weight;
    let mut rows = vec![];
    for &w in &grid.distill_weights {
        rows.push((
            format!("distill λ = {w}"),
            AblationSetting { distill_weight: w, batch_size: b, templates: base_templates_name() },
        ));
    }
    for &bs in &grid.batch_sizes {
        rows.push((
            format!("batch size = {bs}"),
            AblationSetting { distill_weight: lambda, batch_size: bs, templates: base_templates_name() },
        ));
    }
    for v in &grid.template_variants {
        rows.push((
            v.name.clone(),
            AblationSetting { distill_weight: lambda, batch_size: b, templates: v.name.clone() },
        ));
    }
    rows
}

struct CellResult {
    target_auc: Option<RunAggregate>,
    final_distillation: Option<RunAggregate>,
}

fn run_cell(
    dataset: &Dataset,
    text: &TextArchive,
    base: &ExperimentConfig,
    grid: &AblationGrid,
    setting: &AblationSetting,
) -> Result<CellResult, Error> {
    let mut config = base.clone();
    config.train.loss.distill_weight = setting.distill_weight;
    config.train.batch_size = setting.batch_size;
    if let Some(v) = grid.template_variants.iter().find(|v| v.name == setting.templates) {
        config.anchors = v.anchors.clone();
    }
    let report = run_experiment(dataset, text, &config)?;
    let dist: Vec<f64> = report.runs.iter().map(|r| r.final_losses.distillation).collect();
    Ok(CellResult {
        target_auc: aggregate_runs(&report.refined_target_aucs()),
        final_distillation: aggregate_runs(&dist),
    })
}

/// One multi-seed fit and evaluation per distinct grid setting. Cell
/// failures are recorded in their row.
pub fn ablate(
    dataset: &Dataset,
    text: &TextArchive,
    base: &ExperimentConfig,
    grid: &AblationGrid,
) -> Result<AblationReport, Error> {
    if grid.distill_weights.is_empty() && grid.batch_sizes.is_empty() && grid.template_variants.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let (_, anchors) = prepare(dataset, text, &base.curation, &base.anchors)?;
    let baseline = evaluate(dataset, Embedder::Teacher, &anchors, &base.eval)?;

    let settings = ablation_settings(base, grid);
    let mut distinct: Vec<&AblationSetting> = vec![];
    for (_, s) in &settings {
        if !distinct.contains(&s) {
            distinct.push(s);
        }
    }
    let results: Vec<Result<CellResult, Error>> =
        distinct.par_iter().map(|s| run_cell(dataset, text, base, grid, s)).collect();

    let rows = settings
        .iter()
        .map(|(label, setting)| {
            let i = distinct.iter().position(|s| *s == setting).expect("collected above");
            let (target_auc, final_distillation, error) = match &results[i] {
                Ok(c) => (c.target_auc.clone(), c.final_distillation.clone(), None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            AblationRow { label: label.clone(), setting: setting.clone(), target_auc, final_distillation, error }
        })
        .collect();
    Ok(AblationReport { base: base.clone(), grid: grid.clone(), baseline_target_auc: baseline.target_auc(), rows })
}
