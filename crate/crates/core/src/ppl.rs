//! Sequence negative log-likelihood and perplexity over generated tokens.
//!
//! Everything stays in log space until the final `exp`, so long sequences
//! never underflow. Only response tokens are scored; callers must not pass
//! prompt tokens in.

use serde::{Deserialize, Serialize};

use crate::error::{CarError, Result};

/// Largest positive log-probability accepted as backend rounding noise.
/// Values in `(0, LOGPROB_SLACK]` are clamped to zero.
pub const LOGPROB_SLACK: f64 = 1e-9;

/// Per-token natural-log probabilities of a generated response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    tokens: Vec<String>,
    logprobs: Vec<f64>,
}

impl TokenLogProbs {
    pub fn new(tokens: Vec<String>, logprobs: Vec<f64>) -> Result<Self> {
        if tokens.len() != logprobs.len() {
            return Err(CarError::LengthMismatch {
                tokens: tokens.len(),
                logprobs: logprobs.len(),
            });
        }
        Ok(Self { tokens, logprobs })
    }

    /// Builds a sequence with placeholder token ids `t0, t1, ...`.
    pub fn from_logprobs(logprobs: Vec<f64>) -> Self {
        let tokens = (0..logprobs.len()).map(|i| format!("t{i}")).collect();
        Self { tokens, logprobs }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }

    pub fn push(&mut self, token: impl Into<String>, logprob: f64) {
        self.tokens.push(token.into());
        self.logprobs.push(logprob);
    }
}

/// Perplexity of a scored sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub value: f64,
    pub token_count: usize,
}

fn checked_logprob(index: usize, value: f64) -> Result<f64> {
    if !value.is_finite() || value > LOGPROB_SLACK {
        return Err(CarError::InvalidLogProb { index, value });
    }
    Ok(value.min(0.0))
}

/// Mean negative log-likelihood in nats per token.
pub fn sequence_nll(lp: &TokenLogProbs) -> Result<f64> {
    if lp.is_empty() {
        return Err(CarError::EmptySequence);
    }
    let mut total = 0.0;
    for (i, &v) in lp.logprobs.iter().enumerate() {
        total -= checked_logprob(i, v)?;
    }
    Ok(total / lp.len() as f64)
}

pub fn compute_ppl(lp: &TokenLogProbs) -> Result<Perplexity> {
    let nll = sequence_nll(lp)?;
    Ok(Perplexity {
        value: nll.exp(),
        token_count: lp.len(),
    })
}
