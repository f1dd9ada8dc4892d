//! Prototype-anchored refinement of frozen vision-language embeddings.
//!
//! A small residual head is trained on top of frozen teacher embeddings so
//! that curated images align with frozen text anchors under a binary
//! cross-entropy objective, while a cosine distillation term keeps the
//! refined embedding close to the teacher. Evaluation scores images
//! zero-shot against positive and negative anchors.
//!
//! Numeric kernels are generic over [`numerics::Scalar`]; the aliases below
//! fix the scalar to `f64`, which is what the pipeline uses.

pub mod anchors;
pub mod curation;
pub mod data;
pub mod eval;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synth;
pub mod train;

use thiserror::Error;

pub type Matrix = numerics::Matrix<f64>;
pub type AdamState = numerics::AdamState<f64>;
pub type StudentHead = model::StudentHead<f64>;
pub type HeadGradients = model::HeadGradients<f64>;
pub type ForwardTrace = model::ForwardTrace<f64>;
pub type ScoreSet = eval::ScoreSet<f64>;
pub type Objective = train::Objective<f64>;

/// Any failure of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Curation(#[from] curation::CurationError),
    #[error(transparent)]
    Anchors(#[from] anchors::AnchorError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Loss(#[from] loss::LossError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error("{0}")]
    Config(String),
}

impl Error {
    /// Whether the failure comes from invalid input rather than from a
    /// computation that went wrong.
    pub fn is_validation(&self) -> bool {
        use train::TrainError;
        matches!(
            self,
            Error::Config(_)
                | Error::Synth(_)
                | Error::Curation(_)
                | Error::Anchors(_)
                | Error::Data(_)
                | Error::Loss(loss::LossError::Config(_))
                | Error::Train(TrainError::Config(_) | TrainError::Loss(loss::LossError::Config(_)))
                | Error::Eval(eval::EvalError::TargetSensitivity(_) | eval::EvalError::MissingAnchor(_))
        )
    }
}
