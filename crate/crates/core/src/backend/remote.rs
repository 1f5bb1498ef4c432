//! Client for a JSON completion endpoint that can echo prompt log-probabilities.
//!
//! Requests go to `POST {endpoint}/completions` with a body of the form
//!
//! ```json
//! {"model": "...", "prompt": "...", "max_tokens": 0, "temperature": 0,
//!  "echo": true, "logprobs": 1}
//! ```
//!
//! and the first choice of the response is read:
//!
//! ```json
//! {"choices": [{"text": "...", "logprobs": {
//!    "tokens": ["..."], "token_logprobs": [null, -0.3],
//!    "text_offset": [0, 5], "top_logprobs": [{"tok": -0.1}]}}]}
//! ```
//!
//! Spans of the prompt (the query, or some passages) are scored by summing
//! the echoed log-probabilities of tokens whose `text_offset` falls inside
//! them. Prompts always follow [`PROMPT_TEMPLATE`].

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Backend, BackendError, BackendOptions, SpanLogprobs, TokenDistribution};
use crate::types::{Passage, Query};

/// The single prompt layout used for every request.
pub const PROMPT_TEMPLATE: &str = "Passage 1: {text}\\n...Passage k: {text}\\nQuestion: {query}\\nAnswer:";

const TOP_LOGPROBS: u32 = 20;
const MAX_ANSWER_TOKENS: u32 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://localhost:8000/v1`.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry_budget: u32,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        let defaults = BackendOptions::default();
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            timeout: defaults.timeout,
            retry_budget: defaults.retry_budget,
        }
    }

    pub fn with_options(mut self, opts: &BackendOptions) -> Self {
        self.timeout = opts.timeout;
        self.retry_budget = opts.retry_budget;
        self
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    calls: AtomicUsize,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Default, Deserialize)]
struct Logprobs {
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Vec<usize>,
    #[serde(default)]
    top_logprobs: Vec<Option<BTreeMap<String, f64>>>,
}

/// A rendered prompt plus the byte ranges of each part.
struct Prompt {
    text: String,
    passages: Vec<Range<usize>>,
    query: Range<usize>,
}

fn render(context: &[&Passage], query: Option<&Query>, with_answer_cue: bool) -> Prompt {
    let mut text = String::new();
    let mut passages = Vec::with_capacity(context.len());
    for (i, p) in context.iter().enumerate() {
        text.push_str(&format!("Passage {}: ", i + 1));
        let start = text.len();
        text.push_str(p.text.trim());
        passages.push(start..text.len());
        text.push('\n');
    }
    let mut query_range = text.len()..text.len();
    if let Some(q) = query {
        text.push_str("Question: ");
        let start = text.len();
        text.push_str(q.text.trim());
        query_range = start..text.len();
        if with_answer_cue {
            text.push_str("\nAnswer:");
        }
    }
    Prompt {
        text,
        passages,
        query: query_range,
    }
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            agent,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/completions", self.config.endpoint.trim_end_matches('/'))
    }

    fn request(&self, body: &serde_json::Value) -> Result<Choice, BackendError> {
        let mut attempt = 0;
        loop {
            let result = self.request_once(body);
            match result {
                Err(e) if e.is_transient() && attempt < self.config.retry_budget => {
                    attempt += 1;
                    log::warn!("retrying completion request ({attempt}/{}): {e}", self.config.retry_budget);
                    std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
                }
                other => return other,
            }
        }
    }

    fn request_once(&self, body: &serde_json::Value) -> Result<Choice, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut req = self.agent.post(self.url()).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send(serde_json::to_vec(body).expect("json body"))
            .map_err(|e| BackendError::Unreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Unreachable(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        let parsed: CompletionResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))
    }

    /// Echoed log-probabilities of the prompt tokens that start inside `span`.
    fn span_logprobs(&self, prompt: &Prompt, spans: &[Range<usize>]) -> Result<SpanLogprobs, BackendError> {
        let body = json!({
            "model": self.config.model,
            "prompt": prompt.text,
            "max_tokens": 0,
            "temperature": 0,
            "echo": true,
            "logprobs": 1,
        });
        let lp = self
            .request(&body)?
            .logprobs
            .ok_or_else(|| BackendError::Protocol("response carries no logprobs".into()))?;
        if lp.token_logprobs.len() != lp.text_offset.len() {
            return Err(BackendError::Protocol("token_logprobs and text_offset differ in length".into()));
        }
        let picked: Vec<f64> = lp
            .text_offset
            .iter()
            .zip(&lp.token_logprobs)
            .filter(|(off, _)| spans.iter().any(|s| s.contains(off)))
            .filter_map(|(_, lp)| *lp)
            .collect();
        if picked.is_empty() {
            return Err(BackendError::Protocol("no echoed tokens fall inside the scored span".into()));
        }
        Ok(SpanLogprobs(picked))
    }
}

impl Backend for RemoteBackend {
    fn model_tag(&self) -> &str {
        &self.config.model
    }

    fn query_logprobs(&self, query: &Query, context: &[&Passage]) -> Result<SpanLogprobs, BackendError> {
        if query.text.trim().is_empty() {
            return Err(BackendError::EmptyQuery);
        }
        let prompt = render(context, Some(query), false);
        let span = prompt.query.clone();
        self.span_logprobs(&prompt, &[span])
    }

    fn context_logprobs(&self, preceding: &[&Passage], target: &[&Passage]) -> Result<SpanLogprobs, BackendError> {
        if target.is_empty() {
            return Err(BackendError::EmptyContext);
        }
        let all: Vec<&Passage> = preceding.iter().chain(target).copied().collect();
        let prompt = render(&all, None, false);
        let spans = prompt.passages[preceding.len()..].to_vec();
        self.span_logprobs(&prompt, &spans)
    }

    fn generate(&self, query: &Query, context: &[&Passage]) -> Result<String, BackendError> {
        let prompt = render(context, Some(query), true);
        let body = json!({
            "model": self.config.model,
            "prompt": prompt.text,
            "max_tokens": MAX_ANSWER_TOKENS,
            "temperature": 0,
            "stop": ["\n"],
        });
        let answer = self.request(&body)?.text.trim().to_string();
        if answer.is_empty() {
            return Err(BackendError::EmptyGeneration);
        }
        Ok(answer)
    }

    /// Top first-token alternatives, renormalized over the returned candidates.
    fn first_token_distribution(&self, query: &Query, context: &[&Passage]) -> Result<TokenDistribution, BackendError> {
        let prompt = render(context, Some(query), true);
        let body = json!({
            "model": self.config.model,
            "prompt": prompt.text,
            "max_tokens": 1,
            "temperature": 0,
            "logprobs": TOP_LOGPROBS,
        });
        let lp = self
            .request(&body)?
            .logprobs
            .ok_or(BackendError::TokenProbabilitiesUnsupported)?;
        let top = lp
            .top_logprobs
            .into_iter()
            .next()
            .flatten()
            .ok_or(BackendError::TokenProbabilitiesUnsupported)?;
        TokenDistribution::from_weights(top.into_iter().map(|(t, l)| (t, l.exp())).collect())
    }

    fn token_probabilities(&self) -> bool {
        true
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_spans_cover_the_right_text() {
        let a = Passage::new("a", " Alpha text ", 1);
        let b = Passage::new("b", "Beta", 2);
        let q = Query::new("q", "Why?");
        let p = render(&[&a, &b], Some(&q), true);
        assert_eq!(p.text, "Passage 1: Alpha text\nPassage 2: Beta\nQuestion: Why?\nAnswer:");
        assert_eq!(&p.text[p.passages[0].clone()], "Alpha text");
        assert_eq!(&p.text[p.passages[1].clone()], "Beta");
        assert_eq!(&p.text[p.query.clone()], "Why?");
    }
}
