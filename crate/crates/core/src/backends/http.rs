//! Client for completions-style HTTP endpoints that return per-token logprobs.
//!
//! Request body: `{model, prompt, max_tokens, logprobs, temperature}`.
//! Accepted response shapes:
//!
//! ```text
//! {"text": "...", "tokens": [...], "token_logprobs": [...]}
//! {"choices": [{"text": "...", "logprobs": {"tokens": [...], "token_logprobs": [...]}}],
//!  "usage": {"completion_tokens": N}}
//! ```

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::warn;

use super::{
    build_prompt, extract_final_answer, BackendError, GenerationBackend, GenerationResult,
    InferenceQuery, LONG_INSTRUCTION, SHORT_INSTRUCTION,
};
use crate::error::{CarError, Result};
use crate::ppl::TokenLogProbs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpBackendConfig {
    /// Endpoint root; requests go to `{base_url}/completions`.
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    /// Prefix placed before the token in the auth header; empty for none.
    #[serde(default = "default_auth_scheme")]
    pub auth_scheme: String,
    /// Name of the environment variable holding the API token.
    #[serde(default = "default_token_env")]
    pub auth_token_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Extra attempts allowed after the first failed one.
    #[serde(default = "default_retry_budget")]
    pub retry_budget: u32,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_short_max")]
    pub max_tokens_short: u32,
    #[serde(default = "default_long_max")]
    pub max_tokens_long: u32,
    #[serde(default = "default_http_in_flight")]
    pub max_in_flight: usize,
}

fn default_auth_header() -> String {
    "Authorization".into()
}
fn default_auth_scheme() -> String {
    "Bearer".into()
}
fn default_token_env() -> String {
    "CAR_API_TOKEN".into()
}
fn default_timeout() -> u64 {
    60
}
fn default_retry_budget() -> u32 {
    2
}
fn default_backoff() -> u64 {
    250
}
fn default_short_max() -> u32 {
    64
}
fn default_long_max() -> u32 {
    1024
}
fn default_http_in_flight() -> usize {
    4
}

impl HttpBackendConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            auth_header: default_auth_header(),
            auth_scheme: default_auth_scheme(),
            auth_token_env: default_token_env(),
            timeout_secs: default_timeout(),
            retry_budget: default_retry_budget(),
            retry_backoff_ms: default_backoff(),
            max_tokens_short: default_short_max(),
            max_tokens_long: default_long_max(),
            max_in_flight: default_http_in_flight(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CarError::Config(format!("http backend config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CarError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies `CAR_HTTP_BASE_URL`, `CAR_HTTP_MODEL`, `CAR_HTTP_TIMEOUT_SECS`
    /// and `CAR_HTTP_RETRY_BUDGET` overrides from `lookup`.
    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = lookup("CAR_HTTP_BASE_URL") {
            self.base_url = v;
        }
        if let Some(v) = lookup("CAR_HTTP_MODEL") {
            self.model = v;
        }
        if let Some(v) = lookup("CAR_HTTP_TIMEOUT_SECS") {
            self.timeout_secs = v
                .parse()
                .map_err(|_| CarError::Config(format!("CAR_HTTP_TIMEOUT_SECS={v}")))?;
        }
        if let Some(v) = lookup("CAR_HTTP_RETRY_BUDGET") {
            self.retry_budget = v
                .parse()
                .map_err(|_| CarError::Config(format!("CAR_HTTP_RETRY_BUDGET={v}")))?;
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_overrides(|k| std::env::var(k).ok())
    }

    fn endpoint(&self) -> String {
        format!("{}/completions", self.base_url.trim_end_matches('/'))
    }
}

/// Parsed completion body, before mode-specific interpretation.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub tokens: Option<Vec<String>>,
    pub token_logprobs: Option<Vec<Option<f64>>>,
    pub completion_tokens: Option<u64>,
}

fn string_list(v: &Value, what: &str) -> Result<Vec<String>, BackendError> {
    v.as_array()
        .ok_or_else(|| BackendError::Protocol(format!("{what} is not an array")))?
        .iter()
        .map(|t| {
            t.as_str()
                .map(str::to_owned)
                .ok_or_else(|| BackendError::Protocol(format!("{what} holds a non-string")))
        })
        .collect()
}

fn logprob_list(v: &Value) -> Result<Vec<Option<f64>>, BackendError> {
    v.as_array()
        .ok_or_else(|| BackendError::Protocol("token_logprobs is not an array".into()))?
        .iter()
        .map(|x| match x {
            Value::Null => Ok(None),
            other => other
                .as_f64()
                .map(Some)
                .ok_or_else(|| BackendError::Protocol("token_logprobs holds a non-number".into())),
        })
        .collect()
}

/// Reads either the flat or the `choices[0]` response shape.
pub fn parse_completion(body: &Value) -> Result<Completion, BackendError> {
    let (node, lp_node) = match body.get("choices") {
        Some(choices) => {
            let first = choices
                .get(0)
                .ok_or_else(|| BackendError::Protocol("empty choices array".into()))?;
            (first, first.get("logprobs").filter(|v| !v.is_null()))
        }
        None => (body, Some(body)),
    };
    let text = node
        .get("text")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Protocol("response has no text".into()))?
        .to_string();
    let tokens = match lp_node.and_then(|n| n.get("tokens")) {
        Some(v) if !v.is_null() => Some(string_list(v, "tokens")?),
        _ => None,
    };
    let token_logprobs = match lp_node.and_then(|n| n.get("token_logprobs")) {
        Some(v) if !v.is_null() => Some(logprob_list(v)?),
        _ => None,
    };
    let completion_tokens = body
        .get("usage")
        .and_then(|u| u.get("completion_tokens"))
        .and_then(Value::as_u64);
    Ok(Completion {
        text,
        tokens,
        token_logprobs,
        completion_tokens,
    })
}

fn completion_logprobs(c: &Completion) -> Result<Option<TokenLogProbs>, BackendError> {
    let Some(raw) = &c.token_logprobs else {
        return Ok(None);
    };
    let values: Option<Vec<f64>> = raw.iter().copied().collect();
    let values = values.ok_or(BackendError::MissingLogprobs)?;
    let lp = match &c.tokens {
        Some(tokens) => TokenLogProbs::new(tokens.clone(), values)
            .map_err(|e| BackendError::Protocol(e.to_string()))?,
        None => TokenLogProbs::from_logprobs(values),
    };
    Ok(Some(lp))
}

pub(super) fn short_result(c: Completion) -> Result<GenerationResult, BackendError> {
    let lp = completion_logprobs(&c)?.ok_or(BackendError::MissingLogprobs)?;
    if lp.is_empty() {
        return Err(BackendError::MissingLogprobs);
    }
    Ok(GenerationResult {
        answer: c.text.clone(),
        raw_output: c.text,
        generated_tokens: lp.len() as u64,
        logprobs: Some(lp),
        diagnostics: Vec::new(),
    })
}

pub(super) fn long_result(c: Completion) -> Result<GenerationResult, BackendError> {
    let lp = completion_logprobs(&c)?;
    let generated_tokens = lp
        .as_ref()
        .map(|l| l.len() as u64)
        .or(c.tokens.as_ref().map(|t| t.len() as u64))
        .or(c.completion_tokens)
        .ok_or_else(|| BackendError::Protocol("long response carries no token count".into()))?;
    Ok(GenerationResult {
        answer: extract_final_answer(&c.text)?,
        raw_output: c.text,
        logprobs: lp,
        generated_tokens,
        diagnostics: Vec::new(),
    })
}

pub struct HttpBackend {
    cfg: HttpBackendConfig,
    client: reqwest::blocking::Client,
    token: Option<String>,
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig) -> Result<Self> {
        let token = std::env::var(&cfg.auth_token_env).ok();
        Self::with_token(cfg, token)
    }

    pub fn with_token(cfg: HttpBackendConfig, token: Option<String>) -> Result<Self> {
        if cfg.max_in_flight == 0 {
            return Err(CarError::Config("max_in_flight must be at least 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| CarError::Config(format!("http client: {e}")))?;
        Ok(Self { cfg, client, token })
    }

    fn request_body(&self, q: &InferenceQuery, instruction: &str, max_tokens: u32) -> Value {
        json!({
            "model": self.cfg.model,
            "prompt": build_prompt(q, instruction),
            "max_tokens": max_tokens,
            "logprobs": 1,
            "temperature": 0,
        })
    }

    fn send_once(&self, body: &Value) -> Result<Value, BackendError> {
        let mut req = self.client.post(self.cfg.endpoint()).json(body);
        if let Some(token) = &self.token {
            let value = if self.cfg.auth_scheme.is_empty() {
                token.clone()
            } else {
                format!("{} {}", self.cfg.auth_scheme, token)
            };
            req = req.header(self.cfg.auth_header.as_str(), value);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("bad JSON: {e}")))
    }

    /// Sends with at most `retry_budget` retries on transport errors,
    /// timeouts, 429 and 5xx. Each retry is logged and noted.
    fn send(&self, body: &Value, diagnostics: &mut Vec<String>) -> Result<Value, BackendError> {
        let mut attempt = 0u32;
        loop {
            match self.send_once(body) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.cfg.retry_budget => {
                    attempt += 1;
                    warn!(attempt, error = %e, "retrying completion request");
                    diagnostics.push(format!("retry {attempt}: {e}"));
                    let backoff = self.cfg.retry_backoff_ms.saturating_mul(1 << (attempt - 1).min(6));
                    std::thread::sleep(Duration::from_millis(backoff));
                }
                Err(e) if attempt > 0 => {
                    return Err(BackendError::RetriesExhausted {
                        attempts: attempt + 1,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn generate(
        &self,
        q: &InferenceQuery,
        instruction: &str,
        max_tokens: u32,
        interpret: fn(Completion) -> Result<GenerationResult, BackendError>,
    ) -> Result<GenerationResult, BackendError> {
        let mut diagnostics = Vec::new();
        let body = self.send(&self.request_body(q, instruction, max_tokens), &mut diagnostics)?;
        let mut result = interpret(parse_completion(&body)?)?;
        result.diagnostics = diagnostics;
        Ok(result)
    }
}

impl GenerationBackend for HttpBackend {
    fn generate_short(&self, q: &InferenceQuery) -> Result<GenerationResult, BackendError> {
        self.generate(q, SHORT_INSTRUCTION, self.cfg.max_tokens_short, short_result)
    }

    fn generate_long(&self, q: &InferenceQuery) -> Result<GenerationResult, BackendError> {
        self.generate(q, LONG_INSTRUCTION, self.cfg.max_tokens_long, long_result)
    }

    fn max_in_flight(&self) -> usize {
        self.cfg.max_in_flight
    }

    fn name(&self) -> &str {
        "http"
    }
}
