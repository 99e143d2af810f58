//! Offline backend replaying recorded completion responses.
//!
//! A fixture directory holds one `*.json` document per query:
//!
//! ```json
//! {"query_id": "q1",
//!  "short": {"request": {...}, "response": {"text": "42", "tokens": [...], "token_logprobs": [...]}},
//!  "long":  {"response": {"text": "...\nAnswer: 42", "tokens": [...], "token_logprobs": [...]}}}
//! ```
//!
//! Responses use the same shapes the HTTP backend accepts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::http::{long_result, short_result};
use super::{parse_completion, BackendError, GenerationBackend, GenerationResult, InferenceQuery};
use crate::error::{CarError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureExchange {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<Value>,
    pub response: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureDocument {
    pub query_id: String,
    #[serde(default)]
    pub short: Option<FixtureExchange>,
    #[serde(default)]
    pub long: Option<FixtureExchange>,
}

#[derive(Debug, Clone, Default)]
pub struct FixtureBackend {
    docs: BTreeMap<String, FixtureDocument>,
}

impl FixtureBackend {
    pub fn from_documents(docs: impl IntoIterator<Item = FixtureDocument>) -> Self {
        Self {
            docs: docs.into_iter().map(|d| (d.query_id.clone(), d)).collect(),
        }
    }

    /// Loads every `*.json` file in `dir`; duplicate query ids are an error.
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| CarError::io(dir, e))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut docs = BTreeMap::new();
        for path in paths {
            let text = std::fs::read_to_string(&path).map_err(|e| CarError::io(&path, e))?;
            let doc: FixtureDocument = serde_json::from_str(&text).map_err(|e| CarError::Dataset {
                path: path.clone(),
                line: e.line(),
                detail: e.to_string(),
            })?;
            if docs.contains_key(&doc.query_id) {
                return Err(CarError::Dataset {
                    path,
                    line: 1,
                    detail: format!("duplicate fixture for query {}", doc.query_id),
                });
            }
            docs.insert(doc.query_id.clone(), doc);
        }
        Ok(Self { docs })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    fn exchange(&self, q: &InferenceQuery, long: bool) -> Result<&FixtureExchange, BackendError> {
        let doc = self.docs.get(&q.query_id);
        let ex = doc.and_then(|d| if long { d.long.as_ref() } else { d.short.as_ref() });
        ex.ok_or_else(|| BackendError::UnknownQuery {
            query_id: q.query_id.clone(),
            stage: if long { "long" } else { "short" }.into(),
        })
    }
}

impl GenerationBackend for FixtureBackend {
    fn generate_short(&self, q: &InferenceQuery) -> Result<GenerationResult, BackendError> {
        short_result(parse_completion(&self.exchange(q, false)?.response)?)
    }

    fn generate_long(&self, q: &InferenceQuery) -> Result<GenerationResult, BackendError> {
        long_result(parse_completion(&self.exchange(q, true)?.response)?)
    }

    fn max_in_flight(&self) -> usize {
        8
    }

    fn name(&self) -> &str {
        "fixture"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn doc() -> FixtureDocument {
        serde_json::from_value(json!({
            "query_id": "docvqa-1",
            "short": {
                "request": {"prompt": "…\nPlease directly output the answer."},
                "response": {"text": "42", "tokens": ["42", "</s>"], "token_logprobs": [-0.25, -0.05]}
            },
            "long": {
                "response": {"text": "Counting the rows gives 42.\nAnswer: 42", "tokens": ["a", "b", "c"], "token_logprobs": [-0.1, -0.1, -0.1]}
            }
        }))
        .unwrap()
    }

    #[test]
    fn replays_recorded_logprobs() {
        let backend = FixtureBackend::from_documents([doc()]);
        let q = InferenceQuery::new("docvqa-1", "prompt", Some("42".into())).unwrap();
        let short = backend.generate_short(&q).unwrap();
        assert_eq!(short.logprobs.unwrap().logprobs(), &[-0.25, -0.05]);
        let long = backend.generate_long(&q).unwrap();
        assert_eq!(long.answer, "42");
        assert_eq!(long.generated_tokens, 3);
    }

    #[test]
    fn unknown_query() {
        let backend = FixtureBackend::from_documents([doc()]);
        let q = InferenceQuery::new("nope", "prompt", None).unwrap();
        assert!(matches!(
            backend.generate_short(&q),
            Err(BackendError::UnknownQuery { .. })
        ));
    }

    #[test]
    fn loads_directory_and_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let text = serde_json::to_string(&doc()).unwrap();
        std::fs::write(dir.path().join("a.json"), &text).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        assert_eq!(FixtureBackend::load(dir.path()).unwrap().len(), 1);
        std::fs::write(dir.path().join("b.json"), &text).unwrap();
        assert!(FixtureBackend::load(dir.path()).is_err());
    }
}
