//! Generation backends: anything that can answer a query briefly (with
//! per-token log-probabilities) or with long-form reasoning.

mod fixture;
mod http;
mod synthetic;

pub use fixture::{FixtureBackend, FixtureDocument, FixtureExchange};
pub use http::{parse_completion, Completion, HttpBackend, HttpBackendConfig};
pub use synthetic::{synth_sample_ppl, SyntheticBackend, SyntheticBackendConfig, TokenCount};

use serde::{Deserialize, Serialize};

use crate::error::{CarError, Result};
use crate::ppl::TokenLogProbs;

/// Instruction appended to the prompt for short-answer generation.
pub const SHORT_INSTRUCTION: &str = "Please directly output the answer.";
/// Instruction appended to the prompt for long-form reasoning.
pub const LONG_INSTRUCTION: &str =
    "Please output the reasoning process before outputting the answer.";
/// Marker introducing the final answer at the end of a long generation.
pub const ANSWER_MARKER: &str = "Answer:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceQuery {
    pub query_id: String,
    pub prompt_body: String,
    #[serde(default)]
    pub reference: Option<String>,
}

impl InferenceQuery {
    pub fn new(
        query_id: impl Into<String>,
        prompt_body: impl Into<String>,
        reference: Option<String>,
    ) -> Result<Self> {
        let q = Self {
            query_id: query_id.into(),
            prompt_body: prompt_body.into(),
            reference,
        };
        if q.prompt_body.is_empty() {
            return Err(CarError::InvariantViolation(format!(
                "query {} has an empty prompt",
                q.query_id
            )));
        }
        Ok(q)
    }
}

/// Output of one generation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Final answer; for long mode, the text after the last `Answer:` marker.
    pub answer: String,
    pub raw_output: String,
    /// Always present for short mode.
    pub logprobs: Option<TokenLogProbs>,
    pub generated_tokens: u64,
    /// Retry and transport notes collected while producing this result.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("upstream returned no per-token logprobs")]
    MissingLogprobs,
    #[error("no `Answer:` line in long generation ending {tail:?}")]
    AnswerExtractionFailure { tail: String },
    #[error("no recorded response for query {query_id} ({stage} mode)")]
    UnknownQuery { query_id: String, stage: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        last: Box<BackendError>,
    },
    #[error("{0}")]
    Other(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait GenerationBackend: Send + Sync {
    fn generate_short(&self, q: &InferenceQuery) -> Result<GenerationResult, BackendError>;

    fn generate_long(&self, q: &InferenceQuery) -> Result<GenerationResult, BackendError>;

    /// Upper bound on concurrent requests callers may issue.
    fn max_in_flight(&self) -> usize {
        1
    }

    fn name(&self) -> &str;
}

/// Prompt sent upstream: task body, newline, mode instruction.
pub fn build_prompt(q: &InferenceQuery, instruction: &str) -> String {
    format!("{}\n{}", q.prompt_body, instruction)
}

/// Text after the last `Answer:` marker, up to the end of that line, trimmed.
pub fn extract_final_answer(raw: &str) -> Result<String, BackendError> {
    match raw.rfind(ANSWER_MARKER) {
        Some(pos) => {
            let rest = &raw[pos + ANSWER_MARKER.len()..];
            let line = rest.lines().next().unwrap_or("");
            Ok(line.trim().to_string())
        }
        None => {
            let start = raw
                .char_indices()
                .rev()
                .nth(79)
                .map(|(i, _)| i)
                .unwrap_or(0);
            Err(BackendError::AnswerExtractionFailure {
                tail: raw[start..].to_string(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_after_last_marker() {
        let raw = "First, Answer: 41 looks wrong.\nRecount the rows.\nAnswer: 42";
        assert_eq!(extract_final_answer(raw).unwrap(), "42");
        assert_eq!(
            extract_final_answer("…reasoning… Answer: 42").unwrap(),
            "42"
        );
        assert_eq!(
            extract_final_answer("steps\nAnswer:  Saint Louis \n").unwrap(),
            "Saint Louis"
        );
    }

    #[test]
    fn missing_marker_fails() {
        let err = extract_final_answer("The total is 42.").unwrap_err();
        assert!(matches!(err, BackendError::AnswerExtractionFailure { .. }));
    }

    #[test]
    fn empty_prompt_rejected() {
        assert!(InferenceQuery::new("q", "", None).is_err());
        let q = InferenceQuery::new("q", "What is 6*7?", Some("42".into())).unwrap();
        assert_eq!(
            build_prompt(&q, SHORT_INSTRUCTION),
            "What is 6*7?\nPlease directly output the answer."
        );
    }

    #[test]
    fn retryable_classification() {
        assert!(BackendError::Timeout.is_retryable());
        assert!(BackendError::Status { status: 503, body: String::new() }.is_retryable());
        assert!(BackendError::Status { status: 429, body: String::new() }.is_retryable());
        assert!(!BackendError::Status { status: 400, body: String::new() }.is_retryable());
        assert!(!BackendError::MissingLogprobs.is_retryable());
    }
}
