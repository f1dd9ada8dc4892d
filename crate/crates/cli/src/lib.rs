//! The `protoclip` command line: a JSON-configured front end over the
//! library pipeline.
//!
//! Every run resolves one [`PipelineConfig`]: defaults, then the `--config`
//! file, then command-line flags. Reports embed the resolved config and seed.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use schemars::{schema_for, JsonSchema};
use serde::{Deserialize, Serialize};

use protoclip::anchors::{build_anchor_set, AnchorConfig, AnchorManifest, AnchorSet};
use protoclip::curation::{curate, load_curation_csv, save_curation_csv, BucketStats, CurationConfig};
use protoclip::data::{
    cooccurrence_table, load_archive, load_text_archive, read_manifest, save_archive, save_text_archive,
    CooccurrenceRow, Dataset, LabelVocabulary, Manifest, Split,
};
use protoclip::eval::{aggregate_reports, dump_embeddings, evaluate, Embedder, EvalConfig, EvalReport, MultiRunReport};
use protoclip::loss::LossBreakdown;
use protoclip::model::CheckpointManifest;
use protoclip::pipeline::{ablate, AblationGrid, AblationReport, ExperimentConfig};
use protoclip::synth::{generate, SynthConfig, SynthTruth};
use protoclip::train::{run_multi_seed, TrainConfig, TrainLog};
use protoclip::StudentHead;

/// Output paths used when neither the config nor a flag names one.
pub mod defaults {
    pub const SYNTH_OUT: &str = "synth";
    pub const CURATION: &str = "curation.csv";
    pub const ANCHORS: &str = "anchors";
    pub const CHECKPOINT: &str = "checkpoints";
    pub const EVAL_REPORT: &str = "report.json";
    pub const ABLATION_REPORT: &str = "ablation.json";
    pub const EMBEDDINGS: &str = "embeddings.csv";
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct PathsConfig {
    /// Image archive directory.
    pub archive: Option<PathBuf>,
    /// Text-prompt archive directory.
    pub prompts: Option<PathBuf>,
    /// Curation CSV.
    pub curation: Option<PathBuf>,
    /// Anchor set directory.
    pub anchors: Option<PathBuf>,
    /// Checkpoint directory: one head, or a training output with `seed-*`
    /// subdirectories.
    pub checkpoint: Option<PathBuf>,
    /// Output of the current subcommand.
    pub output: Option<PathBuf>,
}

/// Everything a run can be configured with; missing keys take defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct PipelineConfig {
    /// Master seed; when set it replaces the synth, curation and training
    /// seeds (training uses `seed..seed + n`).
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub curation: CurationConfig,
    pub anchors: AnchorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationGrid,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    /// Pushes the master seed into every stage.
    pub fn resolve_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.synth.seed = seed;
            let experiment = self.experiment().with_seed(seed);
            self.curation = experiment.curation;
            self.train = experiment.train;
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            curation: self.curation.clone(),
            anchors: self.anchors.clone(),
            train: self.train.clone(),
            eval: self.eval.clone(),
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, config or inputs; exit code 1.
    Validation(String),
    /// A failure while computing; exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }

    /// One JSON object on one line.
    pub fn to_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.message() }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind(), self.message())
    }
}

impl From<protoclip::Error> for CliError {
    fn from(e: protoclip::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

macro_rules! lift {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                protoclip::Error::from(e).into()
            }
        }
    )*};
}
lift!(
    protoclip::data::DataError,
    protoclip::curation::CurationError,
    protoclip::anchors::AnchorError,
    protoclip::model::ModelError,
    protoclip::train::TrainError,
    protoclip::eval::EvalError,
    protoclip::synth::SynthError
);

#[derive(Debug, Parser)]
#[command(name = "protoclip", version, about = "Prototype-anchored refinement of frozen embeddings")]
pub struct Cli {
    /// JSON pipeline config; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic image archive, prompt archive and truth file.
    Synth(SynthArgs),
    /// Build the curated training set and its report.
    Curate(CurateArgs),
    /// Build text anchors from a prompt archive.
    Anchors(AnchorsArgs),
    /// Fit one student head per seed.
    Train(TrainArgs),
    /// Score the teacher and trained heads zero-shot.
    Eval(EvalArgs),
    /// Run the hyperparameter ablation grid.
    Ablate(AblateArgs),
    /// Write embeddings with a 2-D PCA projection as CSV.
    DumpEmbeddings(DumpArgs),
    /// Write JSON schemas for every emitted document.
    Schema(SchemaArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// `paths.output`
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `synth.n_train`
    #[arg(long)]
    pub n_train: Option<usize>,
    /// `synth.n_test`
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// `paths.archive`
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// `curation.target`
    #[arg(long)]
    pub target: Option<String>,
    /// `curation.cap`
    #[arg(long)]
    pub cap: Option<usize>,
    /// `curation.background`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub background: Option<Vec<String>>,
    /// `paths.curation`; the JSON report goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnchorsArgs {
    /// `paths.archive`, read for the label vocabulary.
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// `paths.prompts`
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// `curation.target`
    #[arg(long)]
    pub target: Option<String>,
    /// `paths.anchors`
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `paths.archive`
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// `paths.curation`
    #[arg(long)]
    pub curation: Option<PathBuf>,
    /// `paths.anchors`
    #[arg(long)]
    pub anchors: Option<PathBuf>,
    /// `paths.checkpoint`
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `train.loss.distill_weight`
    #[arg(long)]
    pub lambda: Option<f64>,
    /// `train.batch_size`
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `train.learning_rate`
    #[arg(long)]
    pub lr: Option<f64>,
    /// `train.epochs`
    #[arg(long)]
    pub epochs: Option<usize>,
    /// `train.hidden_dim`
    #[arg(long)]
    pub hidden: Option<usize>,
    /// `train.seeds`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `paths.archive`
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// `paths.anchors`
    #[arg(long)]
    pub anchors: Option<PathBuf>,
    /// `paths.checkpoint`; repeatable, each a head or a directory of
    /// `seed-*` heads.
    #[arg(long, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    /// `eval.findings`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub findings: Option<Vec<String>>,
    /// `eval.target_sensitivity`
    #[arg(long)]
    pub sens: Option<f64>,
    /// `eval.split`
    #[arg(long)]
    pub split: Option<String>,
    /// `paths.output`
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// `paths.archive`
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// `paths.prompts`
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// `ablation.distill_weights`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// `ablation.batch_sizes`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub batch_sizes: Option<Vec<usize>>,
    /// `paths.output`
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    /// `paths.archive`
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// `paths.checkpoint`; the teacher embedding is dumped when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Finding whose label goes in the `label` column; defaults to
    /// `curation.target`.
    #[arg(long)]
    pub finding: Option<String>,
    /// `eval.split`
    #[arg(long)]
    pub split: Option<String>,
    /// `paths.output`
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SchemaArgs {
    /// Directory for the `*.schema.json` files.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CurationReport {
    pub config: PipelineConfig,
    pub seed: u64,
    pub archive: String,
    pub csv: String,
    pub total: usize,
    pub classes: Vec<String>,
    /// Bucket sizes before and after the cap, in class-axis order.
    pub buckets: Vec<BucketStats>,
    /// Target co-occurrence over the train split.
    pub cooccurrence: CooccurrenceRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TrainedRun {
    pub seed: u64,
    /// Checkpoint directory relative to the training output.
    pub checkpoint: String,
    pub steps: usize,
    pub stopped_early: bool,
    pub final_losses: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TrainSummary {
    pub config: PipelineConfig,
    pub seeds: Vec<u64>,
    pub curated_examples: usize,
    pub runs: Vec<TrainedRun>,
}

/// Wall-clock timings, kept apart from the reproducible outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TrainTiming {
    pub total_secs: f64,
    pub runs: Vec<SeedTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SeedTiming {
    pub seed: u64,
    pub epoch_wall_secs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CheckpointReport {
    pub checkpoint: String,
    pub seed: u64,
    pub step: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EvalOutput {
    pub config: PipelineConfig,
    pub seed: Option<u64>,
    /// Frozen teacher scored against the same anchors.
    pub baseline: EvalReport,
    pub runs: Vec<CheckpointReport>,
    pub aggregate: Option<MultiRunReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AblationOutput {
    pub config: PipelineConfig,
    pub seed: Option<u64>,
    pub report: AblationReport,
}

/// Schema file stem and schema for every JSON document the toolkit writes
/// or reads.
pub fn schemas() -> Vec<(&'static str, serde_json::Value)> {
    let v = |s: schemars::Schema| s.to_value();
    vec![
        ("pipeline-config", v(schema_for!(PipelineConfig))),
        ("archive-manifest", v(schema_for!(Manifest))),
        ("anchors-manifest", v(schema_for!(AnchorManifest))),
        ("checkpoint-manifest", v(schema_for!(CheckpointManifest))),
        ("synth-truth", v(schema_for!(SynthTruth))),
        ("curation-report", v(schema_for!(CurationReport))),
        ("train-summary", v(schema_for!(TrainSummary))),
        ("train-log", v(schema_for!(TrainLog))),
        ("train-timing", v(schema_for!(TrainTiming))),
        ("eval-report", v(schema_for!(EvalOutput))),
        ("ablation-report", v(schema_for!(AblationOutput))),
    ]
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn required(path: &Option<PathBuf>, key: &str, flag: &str) -> Result<PathBuf, CliError> {
    let path = path
        .clone()
        .ok_or_else(|| CliError::Validation(format!("missing paths.{key} (set it in the config or pass --{flag})")))?;
    if !path.exists() {
        return Err(CliError::Validation(format!("paths.{key} {} does not exist", path.display())));
    }
    Ok(path)
}

fn output(config: &PipelineConfig, fallback: &str) -> PathBuf {
    config.paths.output.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| CliError::Validation(format!("unknown split {s:?} (expected train or test)")))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: &Option<PathBuf>) {
    if value.is_some() {
        slot.clone_from(value);
    }
}

fn vocabulary_of(archive: &Path) -> Result<LabelVocabulary, CliError> {
    Ok(LabelVocabulary::new(read_manifest(archive)?.vocabulary)?)
}

/// Expands a training output directory into its `seed-*` heads, ordered by
/// seed; any other path is taken as a single head.
fn expand_checkpoints(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = vec![];
    for p in paths {
        if !p.exists() {
            return Err(CliError::Validation(format!("checkpoint {} does not exist", p.display())));
        }
        let mut seeds: Vec<(u64, PathBuf)> = vec![];
        if p.is_dir() {
            for entry in fs::read_dir(p).map_err(|e| io_error(p, e))? {
                let entry = entry.map_err(|e| io_error(p, e))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if let Some(seed) = name.strip_prefix("seed-").and_then(|s| s.parse().ok()) {
                    seeds.push((seed, entry.path()));
                }
            }
        }
        if seeds.is_empty() {
            out.push(p.clone());
        } else {
            seeds.sort();
            out.extend(seeds.into_iter().map(|(_, path)| path));
        }
    }
    Ok(out)
}

fn run_synth(config: &mut PipelineConfig, args: SynthArgs) -> Result<(), CliError> {
    set_path(&mut config.paths.output, &args.out);
    set(&mut config.synth.n_train, args.n_train);
    set(&mut config.synth.n_test, args.n_test);
    let out = output(config, defaults::SYNTH_OUT);
    let (dataset, text, truth) = generate(&config.synth)?;
    save_archive(&dataset, &out.join("images"))?;
    save_text_archive(&text, &out.join("prompts"))?;
    write_json(&out.join("truth.json"), &truth)?;
    println!(
        "wrote {} images ({} findings, d = {}) and {} prompts to {}",
        dataset.len(),
        dataset.vocabulary().len(),
        dataset.dim(),
        text.prompts().len(),
        out.display()
    );
    Ok(())
}

fn run_curate(config: &mut PipelineConfig, args: CurateArgs) -> Result<(), CliError> {
    set_path(&mut config.paths.archive, &args.archive);
    set_path(&mut config.paths.curation, &args.out);
    set(&mut config.curation.target, args.target);
    set(&mut config.curation.cap, args.cap);
    if args.background.is_some() {
        config.curation.background = args.background;
    }
    let archive = required(&config.paths.archive, "archive", "archive")?;
    let csv = config.paths.curation.clone().unwrap_or_else(|| PathBuf::from(defaults::CURATION));
    let dataset = load_archive(&archive)?;
    let curated = curate(&dataset, &config.curation)?;
    if let Some(parent) = csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    save_curation_csv(&curated, &csv)?;
    let cooccurrence =
        cooccurrence_table(dataset.vocabulary(), dataset.in_split(Split::Train), &config.curation.target)?;
    let report = CurationReport {
        config: config.clone(),
        seed: config.curation.seed,
        archive: archive.display().to_string(),
        csv: csv.display().to_string(),
        total: curated.len(),
        classes: curated.classes.clone(),
        buckets: curated.buckets.clone(),
        cooccurrence,
    };
    let report_path = csv.with_extension("json");
    write_json(&report_path, &report)?;
    println!("{:<24} {:>9} {:>9}", "bucket", "available", "selected");
    for b in &curated.buckets {
        println!("{:<24} {:>9} {:>9}", b.class, b.available, b.selected);
    }
    println!("wrote {} ({} examples) and {}", csv.display(), curated.len(), report_path.display());
    Ok(())
}

fn run_anchors(config: &mut PipelineConfig, args: AnchorsArgs) -> Result<(), CliError> {
    set_path(&mut config.paths.archive, &args.archive);
    set_path(&mut config.paths.prompts, &args.prompts);
    set_path(&mut config.paths.anchors, &args.out);
    set(&mut config.curation.target, args.target);
    let archive = required(&config.paths.archive, "archive", "archive")?;
    let prompts = required(&config.paths.prompts, "prompts", "prompts")?;
    let out = config.paths.anchors.clone().unwrap_or_else(|| PathBuf::from(defaults::ANCHORS));
    let classes = config.curation.class_axis(&vocabulary_of(&archive)?)?;
    let text = load_text_archive(&prompts)?;
    let anchors = build_anchor_set(&text, &classes, &config.anchors)?;
    anchors.save(&out)?;
    println!("wrote {} anchors (d = {}) to {}", anchors.len(), anchors.dim(), out.display());
    Ok(())
}

fn run_train(config: &mut PipelineConfig, args: TrainArgs) -> Result<(), CliError> {
    set_path(&mut config.paths.archive, &args.archive);
    set_path(&mut config.paths.curation, &args.curation);
    set_path(&mut config.paths.anchors, &args.anchors);
    set_path(&mut config.paths.checkpoint, &args.out);
    set(&mut config.train.loss.distill_weight, args.lambda);
    set(&mut config.train.batch_size, args.batch_size);
    set(&mut config.train.learning_rate, args.lr);
    set(&mut config.train.epochs, args.epochs);
    set(&mut config.train.hidden_dim, args.hidden);
    set(&mut config.train.seeds, args.seeds);
    let archive = required(&config.paths.archive, "archive", "archive")?;
    let csv = required(&config.paths.curation, "curation", "curation")?;
    let anchor_dir = required(&config.paths.anchors, "anchors", "anchors")?;
    let out = config.paths.checkpoint.clone().unwrap_or_else(|| PathBuf::from(defaults::CHECKPOINT));

    let dataset = load_archive(&archive)?;
    let mut curated = load_curation_csv(&csv)?;
    let anchors = AnchorSet::load(&anchor_dir)?;
    curated.align_to(anchors.classes())?;
    let started = Instant::now();
    let runs = run_multi_seed(&dataset, &curated, &anchors, &config.train)?;
    let total_secs = started.elapsed().as_secs_f64();

    let mut trained = vec![];
    let mut timing = vec![];
    for run in runs {
        let name = format!("seed-{}", run.seed);
        let dir = out.join(&name);
        run.head.save(&dir, run.log.total_steps() as u64)?;
        let mut log = run.log;
        log.final_checkpoint = Some(name.clone());
        write_json(&dir.join("train_log.json"), &log)?;
        println!(
            "seed {:>3}: {} steps, L = {:.5} (BCE {:.5}, L_dist {:.5})",
            run.seed,
            log.total_steps(),
            log.final_losses.total,
            log.final_losses.bce,
            log.final_losses.distillation
        );
        trained.push(TrainedRun {
            seed: run.seed,
            checkpoint: name,
            steps: log.total_steps(),
            stopped_early: log.stopped_early,
            final_losses: log.final_losses,
        });
        timing.push(SeedTiming { seed: run.seed, epoch_wall_secs: log.epoch_wall_secs });
    }
    let summary = TrainSummary {
        config: config.clone(),
        seeds: config.train.seeds.clone(),
        curated_examples: curated.len(),
        runs: trained,
    };
    write_json(&out.join("train.json"), &summary)?;
    write_json(&out.join("timing.json"), &TrainTiming { total_secs, runs: timing })?;
    println!("wrote {} checkpoints to {} in {total_secs:.1}s", summary.runs.len(), out.display());
    Ok(())
}

fn load_dataset_and_anchors(config: &PipelineConfig) -> Result<(Dataset, AnchorSet), CliError> {
    let archive = required(&config.paths.archive, "archive", "archive")?;
    let anchor_dir = required(&config.paths.anchors, "anchors", "anchors")?;
    Ok((load_archive(&archive)?, AnchorSet::load(&anchor_dir)?))
}

fn run_eval(config: &mut PipelineConfig, args: EvalArgs) -> Result<(), CliError> {
    set_path(&mut config.paths.archive, &args.archive);
    set_path(&mut config.paths.anchors, &args.anchors);
    set_path(&mut config.paths.output, &args.out);
    if let [single] = args.checkpoint.as_slice() {
        config.paths.checkpoint = Some(single.clone());
    }
    if args.findings.is_some() {
        config.eval.findings = args.findings;
    }
    set(&mut config.eval.target_sensitivity, args.sens);
    if let Some(s) = &args.split {
        config.eval.split = parse_split(s)?;
    }
    let out = output(config, defaults::EVAL_REPORT);
    let checkpoint_args =
        if args.checkpoint.is_empty() { config.paths.checkpoint.iter().cloned().collect() } else { args.checkpoint };
    let checkpoints = expand_checkpoints(&checkpoint_args)?;
    let (dataset, anchors) = load_dataset_and_anchors(config)?;

    let baseline = evaluate(&dataset, Embedder::Teacher, &anchors, &config.eval)?;
    let mut runs = vec![];
    for path in &checkpoints {
        let (head, step) = StudentHead::load(path)?;
        let report = evaluate(&dataset, Embedder::Student(&head), &anchors, &config.eval)?;
        runs.push(CheckpointReport { checkpoint: path.display().to_string(), seed: head.seed(), step, report });
    }
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
    let result = EvalOutput {
        config: config.clone(),
        seed: config.seed,
        baseline,
        aggregate: aggregate_reports(&reports),
        runs,
    };
    write_json(&out, &result)?;
    println!("teacher baseline\n{}", result.baseline.to_table());
    if let Some(agg) = &result.aggregate {
        println!("refined over {} checkpoint(s)", result.runs.len());
        println!("{:<24} {:>8} {:>8} {:>19}", "finding", "AUC", "SD", "95% CI");
        for f in &agg.findings {
            match &f.auc {
                Some(a) => println!(
                    "{:<24} {:>8.4} {:>8} {:>19}",
                    f.finding,
                    a.mean,
                    a.sd.map_or("n/a".into(), |s| format!("{s:.4}")),
                    a.ci95.map_or("n/a".into(), |c| format!("[{:.4}, {:.4}]", c[0], c[1]))
                ),
                None => println!("{:<24} {:>8}", f.finding, "n/a"),
            }
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run_ablate(config: &mut PipelineConfig, args: AblateArgs) -> Result<(), CliError> {
    set_path(&mut config.paths.archive, &args.archive);
    set_path(&mut config.paths.prompts, &args.prompts);
    set_path(&mut config.paths.output, &args.out);
    set(&mut config.ablation.distill_weights, args.lambdas);
    set(&mut config.ablation.batch_sizes, args.batch_sizes);
    let archive = required(&config.paths.archive, "archive", "archive")?;
    let prompts = required(&config.paths.prompts, "prompts", "prompts")?;
    let out = output(config, defaults::ABLATION_REPORT);
    let dataset = load_archive(&archive)?;
    let text = load_text_archive(&prompts)?;
    let report = ablate(&dataset, &text, &config.experiment(), &config.ablation)?;
    for row in report.rows.iter().filter(|r| r.error.is_some()) {
        log::warn!("ablation cell {:?} failed: {}", row.label, row.error.as_deref().unwrap_or_default());
    }
    print!("{}", report.to_table());
    write_json(&out, &AblationOutput { config: config.clone(), seed: config.seed, report })?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run_dump(config: &mut PipelineConfig, args: DumpArgs) -> Result<(), CliError> {
    set_path(&mut config.paths.archive, &args.archive);
    set_path(&mut config.paths.checkpoint, &args.checkpoint);
    set_path(&mut config.paths.output, &args.out);
    if let Some(s) = &args.split {
        config.eval.split = parse_split(s)?;
    }
    let archive = required(&config.paths.archive, "archive", "archive")?;
    let out = output(config, defaults::EMBEDDINGS);
    let finding = args.finding.unwrap_or_else(|| config.curation.target.clone());
    let dataset = load_archive(&archive)?;
    let head = match &config.paths.checkpoint {
        Some(path) => {
            let dir = expand_checkpoints(std::slice::from_ref(path))?.remove(0);
            Some(StudentHead::load(&dir)?.0)
        }
        None => None,
    };
    let embedder = head.as_ref().map_or(Embedder::Teacher, Embedder::Student);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    let rows = dump_embeddings(&dataset, embedder, &finding, config.eval.split, &out)?;
    println!("wrote {rows} rows to {}", out.display());
    Ok(())
}

fn run_schema(args: SchemaArgs) -> Result<(), CliError> {
    let out = args.out.unwrap_or_else(|| PathBuf::from("docs"));
    for (name, schema) in schemas() {
        write_json(&out.join(format!("{name}.schema.json")), &schema)?;
    }
    println!("wrote {} schemas to {}", schemas().len(), out.display());
    Ok(())
}

/// Runs an already parsed command line.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if cli.seed.is_some() {
        config.seed = cli.seed;
    }
    config.resolve_seed();
    match cli.command {
        Command::Synth(a) => run_synth(&mut config, a),
        Command::Curate(a) => run_curate(&mut config, a),
        Command::Anchors(a) => run_anchors(&mut config, a),
        Command::Train(a) => run_train(&mut config, a),
        Command::Eval(a) => run_eval(&mut config, a),
        Command::Ablate(a) => run_ablate(&mut config, a),
        Command::DumpEmbeddings(a) => run_dump(&mut config, a),
        Command::Schema(a) => run_schema(a),
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let rendered = e.to_string();
            let message = rendered.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            let usage = rendered.lines().find(|l| l.starts_with("Usage:")).unwrap_or("Usage: protoclip --help");
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": message, "usage": usage }));
            return 1;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_line());
            e.exit_code()
        }
    }
}
