//! Error types shared across the crate.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backends::BackendError;

pub type Result<T, E = CarError> = std::result::Result<T, E>;

/// Which class of calibration sample a message refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Correct,
    Incorrect,
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Class::Correct => f.write_str("correct"),
            Class::Incorrect => f.write_str("incorrect"),
        }
    }
}

/// Generation stage of a routed query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Short,
    Long,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Short => f.write_str("short"),
            Stage::Long => f.write_str("long"),
        }
    }
}

/// Exit-code families used by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    Config,
    Data,
    Backend,
    Numeric,
}

impl ErrorFamily {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorFamily::Config => 2,
            ErrorFamily::Data => 3,
            ErrorFamily::Backend => 4,
            ErrorFamily::Numeric => 5,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CarError {
    #[error("empty sequence")]
    EmptySequence,

    #[error("invalid log-probability {value} at index {index}")]
    InvalidLogProb { index: usize, value: f64 },

    #[error("token/logprob length mismatch: {tokens} tokens, {logprobs} logprobs")]
    LengthMismatch { tokens: usize, logprobs: usize },

    #[error("no {0} samples")]
    MissingClass(Class),

    #[error("unbalanced samples: {correct} correct vs {incorrect} incorrect (balance first)")]
    UnbalancedSamples { correct: usize, incorrect: usize },

    #[error("invalid variance {0}")]
    InvalidVariance(f64),

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema violation in field `{field}`: {detail}")]
    SchemaViolation { field: String, detail: String },

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("backend failure during {stage} generation: {source}")]
    Backend {
        stage: Stage,
        #[source]
        source: BackendError,
    },

    #[error("query {0} has no reference answer")]
    MissingReference(String),

    #[error("no records to report")]
    EmptyRecords,

    #[error("dataset {0} mixes match rules")]
    RuleMix(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dataset {path}, line {line}: {detail}")]
    Dataset {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation aborted after {} completed records: {source}", partial.len())]
    EvalAborted {
        partial: Vec<crate::eval::EvalRecord>,
        #[source]
        source: Box<CarError>,
    },
}

impl CarError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CarError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(field: impl Into<String>, detail: impl Into<String>) -> Self {
        CarError::SchemaViolation {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub fn family(&self) -> ErrorFamily {
        match self {
            CarError::Config(_) | CarError::InvalidGrid(_) => ErrorFamily::Config,
            CarError::EmptySequence
            | CarError::InvalidLogProb { .. }
            | CarError::LengthMismatch { .. }
            | CarError::InvalidVariance(_)
            | CarError::InvalidProfile(_) => ErrorFamily::Numeric,
            CarError::Backend { .. } => ErrorFamily::Backend,
            CarError::EvalAborted { source, .. } => source.family(),
            CarError::MissingClass(_)
            | CarError::UnbalancedSamples { .. }
            | CarError::Io { .. }
            | CarError::SchemaViolation { .. }
            | CarError::InvariantViolation(_)
            | CarError::MissingReference(_)
            | CarError::EmptyRecords
            | CarError::RuleMix(_)
            | CarError::Dataset { .. } => ErrorFamily::Data,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.family().exit_code()
    }
}
