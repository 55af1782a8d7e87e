use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("pass@k domain error: {0}")]
    PassAtK(String),
    #[error("reward must be finite or -inf, got {0}")]
    NonFiniteReward(f64),
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("invalid sandbox config: {0}")]
    Config(String),
    #[error("cannot prepare sandbox workdir: {0}")]
    Workdir(#[source] std::io::Error),
    #[error("no tests supplied")]
    NoTests,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PolicyError {
    #[error("policy unavailable: {0}")]
    Unavailable(String),
    #[error("could not parse policy response: {0}")]
    Parse(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

/// Scorer failures are retriable: the caller may re-run the evaluation.
#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("reward service transport error: {0}")]
    Transport(String),
    #[error("reward service returned malformed response: {0}")]
    Shape(String),
    #[error("feature/weight length mismatch: {features} features vs {weights} weights")]
    LengthMismatch { features: usize, weights: usize },
    #[error("scorer produced invalid reward: {0}")]
    Domain(#[from] DomainError),
    #[error("policy error while scoring: {0}")]
    Policy(#[from] PolicyError),
    #[error("candidate/feedback mismatch: {0}")]
    Misaligned(String),
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("every draft failed to parse")]
    DraftFailure,
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("invalid tree config: {0}")]
    Config(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum BtError {
    #[error("no preference pairs supplied")]
    NoPairs,
    #[error("feature vectors disagree in length: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("features unavailable for code: {0}")]
    MissingFeatures(String),
    #[error("non-finite objective at epoch {epoch}: log-likelihood {value}, weights {weights:?}")]
    NonFinite {
        epoch: usize,
        value: f64,
        weights: Vec<f64>,
    },
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("no valid tasks in {0}")]
    NoTasks(PathBuf),
    #[error("invalid benchmark config: field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
