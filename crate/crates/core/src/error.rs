use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },

    #[error("fewer than 2 phases (found {0})")]
    TooFewPhases(usize),

    #[error("row {row}: negative weight {weight}")]
    NegativeWeight { row: usize, weight: f64 },

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("phase {phase}: node {node} has no group assignment")]
    MissingAssignment { phase: String, node: String },

    #[error("phase {phase}: assignment for unknown node {node}")]
    UnknownNode { phase: String, node: String },

    #[error("phase {phase}: node {node} assigned more than once")]
    DuplicateAssignment { phase: String, node: String },

    #[error("unknown phase {0}")]
    UnknownPhase(String),

    #[error("partition does not match phase {phase}: {reason}")]
    PartitionMismatch { phase: usize, reason: String },

    #[error("jaccard index undefined for two empty sets")]
    EmptySets,

    #[error("similarity matrix is empty")]
    EmptyMatrix,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scenario: {0}")]
    Scenario(String),

    #[error("pool exhausted at step {step}: need {needed} fresh labels, {available} available")]
    PoolExhausted {
        step: usize,
        needed: usize,
        available: usize,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
