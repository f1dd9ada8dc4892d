//! Mini-batch training of the student head against frozen anchors and the
//! frozen teacher.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::AnchorSet;
use crate::curation::CuratedDataset;
use crate::data::Dataset;
use crate::loss::{
    bce_loss, distillation_loss, logits, logits_backward, total_loss, BatchTargets, LossBreakdown, LossConfig,
    LossError,
};
use crate::model::{HeadGradients, ModelError, StudentHead};
use crate::numerics::{adam_step, derive_seed, seeded_rng, sgd_step, AdamConfig, AdamState, NumericsError, Scalar};

const HEAD_INIT_STREAM: u64 = 0x4845_4144;
const EPOCH_STREAM_BASE: u64 = 0x4550_4f43_0000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("curated dataset is empty")]
    EmptyDataset,
    #[error("curated id {0:?} is not in the dataset")]
    MissingExample(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct EarlyStopping {
    /// Stop when the epoch-mean total loss improved by less than this
    /// fraction over the last `patience` epochs.
    pub min_relative_improvement: f64,
    pub patience: usize,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self { min_relative_improvement: 1e-4, patience: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub loss: LossConfig,
    pub seeds: Vec<u64>,
    pub hidden_dim: usize,
    pub optimizer: OptimizerKind,
    pub early_stopping: Option<EarlyStopping>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-4,
            epochs: 10,
            loss: LossConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            hidden_dim: 256,
            optimizer: OptimizerKind::Adam,
            early_stopping: Some(EarlyStopping::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(TrainError::Config("hidden_dim must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// One assembled mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub inputs: Vec<Vec<f64>>,
    pub teachers: Vec<Vec<f64>>,
    pub targets: BatchTargets,
}

/// Seeded permutation of `0..n` cut into chunks of `batch_size`; the last
/// chunk may be short.
pub fn batch_order(n: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(epoch_seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn make_batches(
    dataset: &Dataset,
    curated: &CuratedDataset,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Batch>, TrainError> {
    if curated.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(TrainError::Config("batch_size must be >= 1".into()));
    }
    batch_order(curated.len(), batch_size, epoch_seed)
        .into_iter()
        .map(|chunk| {
            let mut batch = Batch {
                ids: Vec::with_capacity(chunk.len()),
                inputs: Vec::with_capacity(chunk.len()),
                teachers: Vec::with_capacity(chunk.len()),
                targets: BatchTargets::new(vec![], curated.num_classes())?,
            };
            let mut buckets = Vec::with_capacity(chunk.len());
            for i in chunk {
                let entry = &curated.entries[i];
                let ex = dataset.get(&entry.id).ok_or_else(|| TrainError::MissingExample(entry.id.clone()))?;
                batch.ids.push(entry.id.clone());
                batch.inputs.push(ex.head_input().to_vec());
                batch.teachers.push(ex.teacher.clone());
                buckets.push(entry.bucket);
            }
            batch.targets = BatchTargets::new(buckets, curated.num_classes())?;
            Ok(batch)
        })
        .collect()
}

/// Loss values of one batch in the head's scalar type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective<T> {
    pub bce: T,
    pub distillation: T,
    pub total: T,
}

/// Forward, both losses and exact parameter gradients for one batch.
pub fn batch_objective<T: Scalar>(
    head: &StudentHead<T>,
    inputs: &[Vec<T>],
    teachers: &[Vec<T>],
    targets: &BatchTargets,
    anchors: &[Vec<T>],
    config: &LossConfig,
) -> Result<(Objective<T>, HeadGradients<T>), TrainError> {
    let mut embeddings = Vec::with_capacity(inputs.len());
    let mut traces = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (v, trace) = head.forward(x)?;
        embeddings.push(v);
        traces.push(trace);
    }
    let scale = T::lit(config.logit_scale());
    let lambda = T::lit(config.distill_weight);
    let z = logits(&embeddings, anchors, scale);
    let (bce, grad_z) = bce_loss(&z, &targets.to_matrix())?;
    let (dist, grad_dist) = distillation_loss(&embeddings, teachers)?;
    let mut grad_v = logits_backward(&grad_z, anchors, scale);
    for (g, d) in grad_v.iter_mut().zip(&grad_dist) {
        g.iter_mut().zip(d).for_each(|(a, &b)| *a += lambda * b);
    }
    let mut grads = HeadGradients::zeros_like(head);
    for (trace, g) in traces.iter().zip(&grad_v) {
        head.backward_into(trace, g, &mut grads);
    }
    Ok((Objective { bce, distillation: dist, total: total_loss(bce, dist, lambda) }, grads))
}

/// Per-tensor optimizer state for the four trainable tensors.
#[derive(Debug, Clone)]
pub struct HeadOptimizer<T> {
    kind: OptimizerKind,
    learning_rate: f64,
    adam: Vec<AdamState<T>>,
}

impl<T: Scalar> HeadOptimizer<T> {
    pub fn new(head: &StudentHead<T>, kind: OptimizerKind, learning_rate: f64) -> Self {
        let cfg = AdamConfig { learning_rate, ..AdamConfig::default() };
        let adam = head.trainable().iter().map(|t| AdamState::new(t.len(), cfg)).collect();
        Self { kind, learning_rate, adam }
    }

    pub fn step(&mut self, head: &mut StudentHead<T>, grads: &HeadGradients<T>) -> Result<(), NumericsError> {
        for (i, (param, grad)) in head.trainable_mut().into_iter().zip(grads.tensors()).enumerate() {
            match self.kind {
                OptimizerKind::Adam => adam_step(param, grad, &mut self.adam[i])?,
                OptimizerKind::Sgd => sgd_step(param, grad, T::lit(self.learning_rate))?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub bce: f64,
    pub distillation: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean: LossBreakdown,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
pub struct TrainLog {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Mean losses of the returned head over the whole curated set.
    pub final_losses: LossBreakdown,
    pub final_checkpoint: Option<String>,
    /// Wall time per epoch; kept out of the serialized log so logs stay
    /// byte-reproducible.
    #[serde(skip)]
    pub epoch_wall_secs: Vec<f64>,
}

/// Equality ignores wall time.
impl PartialEq for TrainLog {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.steps == other.steps
            && self.epochs == other.epochs
            && self.stopped_early == other.stopped_early
            && self.final_losses == other.final_losses
            && self.final_checkpoint == other.final_checkpoint
    }
}

impl TrainLog {
    pub fn total_steps(&self) -> usize {
        self.steps.len()
    }
}

fn check_alignment(dataset: &Dataset, curated: &CuratedDataset, anchors: &AnchorSet) -> Result<(), TrainError> {
    if anchors.dim() != dataset.dim() {
        return Err(TrainError::Config(format!("anchor dim {} != teacher dim {}", anchors.dim(), dataset.dim())));
    }
    if curated.classes != anchors.classes() {
        return Err(TrainError::Config(format!(
            "curation buckets {:?} do not match anchor classes {:?}",
            curated.classes,
            anchors.classes()
        )));
    }
    Ok(())
}

/// Mean losses of `head` over the full curated set.
pub fn evaluate_objective(
    head: &StudentHead<f64>,
    dataset: &Dataset,
    curated: &CuratedDataset,
    anchors: &AnchorSet,
    loss: &LossConfig,
) -> Result<LossBreakdown, TrainError> {
    let batches = make_batches(dataset, curated, 1024, 0)?;
    let (mut bce, mut dist, mut n) = (0.0, 0.0, 0usize);
    for b in &batches {
        let (obj, _) = batch_objective(head, &b.inputs, &b.teachers, &b.targets, anchors.anchors(), loss)?;
        bce += obj.bce * b.ids.len() as f64;
        dist += obj.distillation * b.ids.len() as f64;
        n += b.ids.len();
    }
    let (bce, dist) = (bce / n as f64, dist / n as f64);
    Ok(LossBreakdown { bce, distillation: dist, total: total_loss(bce, dist, loss.distill_weight) })
}

/// Trains one head for one seed.
pub fn fit(
    dataset: &Dataset,
    curated: &CuratedDataset,
    anchors: &AnchorSet,
    config: &TrainConfig,
    seed: u64,
) -> Result<(StudentHead<f64>, TrainLog), TrainError> {
    config.validate()?;
    check_alignment(dataset, curated, anchors)?;
    if curated.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let mut head = StudentHead::init_identity(
        dataset.input_dim(),
        dataset.dim(),
        config.hidden_dim,
        derive_seed(seed, HEAD_INIT_STREAM),
    )?;
    let mut optimizer = HeadOptimizer::new(&head, config.optimizer, config.learning_rate);
    let mut log = TrainLog {
        seed,
        steps: vec![],
        epochs: vec![],
        stopped_early: false,
        final_losses: LossBreakdown { bce: 0.0, distillation: 0.0, total: 0.0 },
        final_checkpoint: None,
        epoch_wall_secs: vec![],
    };

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let batches =
            make_batches(dataset, curated, config.batch_size, derive_seed(seed, EPOCH_STREAM_BASE + epoch as u64))?;
        let mut sums = (0.0, 0.0, 0.0);
        for batch in &batches {
            let (obj, grads) = batch_objective(
                &head,
                &batch.inputs,
                &batch.teachers,
                &batch.targets,
                anchors.anchors(),
                &config.loss,
            )?;
            let step = log.steps.len();
            if !(obj.bce.is_finite() && obj.distillation.is_finite() && obj.total.is_finite()) {
                return Err(TrainError::NonFiniteLoss { step });
            }
            log.steps.push(StepRecord { epoch, step, bce: obj.bce, distillation: obj.distillation, total: obj.total });
            sums.0 += obj.bce;
            sums.1 += obj.distillation;
            sums.2 += obj.total;
            optimizer.step(&mut head, &grads)?;
        }
        let k = batches.len() as f64;
        log.epochs.push(EpochRecord {
            epoch,
            steps: batches.len(),
            mean: LossBreakdown { bce: sums.0 / k, distillation: sums.1 / k, total: sums.2 / k },
        });
        log.epoch_wall_secs.push(started.elapsed().as_secs_f64());

        if let Some(stop) = config.early_stopping {
            if plateaued(&log.epochs, stop) {
                log.stopped_early = epoch + 1 < config.epochs;
                break;
            }
        }
    }

    head.round_to_storage();
    log.final_losses = evaluate_objective(&head, dataset, curated, anchors, &config.loss)?;
    Ok((head, log))
}

fn plateaued(epochs: &[EpochRecord], stop: EarlyStopping) -> bool {
    let n = epochs.len();
    if stop.patience == 0 || n <= stop.patience {
        return false;
    }
    let before = epochs[n - 1 - stop.patience].mean.total;
    let now = epochs[n - 1].mean.total;
    (before - now) / before.abs().max(f64::MIN_POSITIVE) < stop.min_relative_improvement
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub head: StudentHead<f64>,
    pub log: TrainLog,
}

/// Independent fits, one per configured seed, returned in seed order.
pub fn run_multi_seed(
    dataset: &Dataset,
    curated: &CuratedDataset,
    anchors: &AnchorSet,
    config: &TrainConfig,
) -> Result<Vec<SeedRun>, TrainError> {
    if config.seeds.is_empty() {
        return Err(TrainError::Config("at least one seed is required".into()));
    }
    config
        .seeds
        .par_iter()
        .map(|&seed| fit(dataset, curated, anchors, config, seed).map(|(head, log)| SeedRun { seed, head, log }))
        .collect()
}
