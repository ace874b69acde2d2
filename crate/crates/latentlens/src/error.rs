//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("numeric failure in component {component}: {reason}")]
    Numeric { component: usize, reason: String },

    #[error("trajectory diverged at t = {last_valid_time}: state left the guard region")]
    TrajectoryBlowUp { last_valid_time: f64 },

    #[error("cannot balance pool: class {class} has no records")]
    EmptyClass { class: usize },

    #[error("cannot stratify: label {label} has {count} records, need at least {levels}")]
    Stratify {
        label: usize,
        count: usize,
        levels: usize,
    },

    #[error("cannot split: {0}")]
    Split(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("training failed at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("fit error: {0}")]
    Fit(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("diversity undefined: needs at least 2 samples, got {0}")]
    DiversityUndefined(usize),

    #[error("seed filter exhausted after {draws} draws with no accepted seed")]
    Exhausted { draws: usize },

    #[error("cannot emit {kind}: table is empty")]
    EmptyTable { kind: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Tags an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
