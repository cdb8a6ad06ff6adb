use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("unknown label {label} (corpus has {num_classes} classes)")]
    UnknownLabel { label: usize, num_classes: usize },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("need at least {required} dialogues to split, found {found}")]
    TooFewDialogues { required: usize, found: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("generator has not been trained")]
    UntrainedGenerator,

    #[error("sigma must be strictly positive, found {0}")]
    NonPositiveSigma(f64),

    #[error("fusion model has not been trained")]
    UntrainedFusion,

    #[error("empty sequence")]
    EmptySequence,

    #[error("mask rate must lie in [0, 1), found {0}")]
    InvalidRate(f64),

    #[error("row {row} is not a probability vector (sum {sum})")]
    NotAProbability { row: usize, sum: f64 },

    #[error("weak learner no better than chance at round 1 (weighted error {0})")]
    DegenerateRound(f64),

    #[error("ensemble has no fitted learners")]
    UnfittedEnsemble,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("run artifacts not found at {0}")]
    MissingRun(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}

/// Attaches a pipeline stage name to errors bubbling out of a module.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
