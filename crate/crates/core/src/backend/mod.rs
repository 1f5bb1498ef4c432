//! Generator backends and permutation scoring.
//!
//! A [`Backend`] exposes the handful of generator signals the rest of the
//! crate needs: per-token log-probabilities of the query given an ordered
//! context, log-probabilities of the context itself, greedy generation, and
//! the distribution over the first response token.
//!
//! Two implementations ship: [`SimulatedBackend`], which realizes the linear
//! bias-utility model exactly, and [`RemoteBackend`], a client for a JSON
//! completion endpoint. [`stub`] is a small in-process server speaking the
//! remote protocol, used by tests and offline demos.

mod cache;
mod remote;
mod sim;
pub mod stub;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::permute::PermutationDesign;
use crate::types::{apply_permutation, Passage, Permutation, Query, RetrievalList};

pub use cache::{CacheKey, CacheStats, ScoreCache};
pub use remote::{RemoteBackend, RemoteConfig, PROMPT_TEMPLATE};
pub use sim::{SimOracleConfig, SimulatedBackend};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("backend produced an empty generation")]
    EmptyGeneration,
    #[error("backend does not expose token-level probabilities")]
    TokenProbabilitiesUnsupported,
    #[error("no simulated oracle configured for query `{0}`")]
    UnknownQuery(String),
    #[error("malformed permutation: {0}")]
    Permutation(String),
    #[error("query text is empty")]
    EmptyQuery,
    #[error("context is empty")]
    EmptyContext,
    #[error("{0}")]
    Other(String),
}

impl BackendError {
    /// Worth retrying: network trouble and server-side failures.
    pub fn is_transient(&self) -> bool {
        match self {
            Self::Unreachable(_) => true,
            Self::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Log-probabilities of consecutive tokens of some span of text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanLogprobs(pub Vec<f64>);

impl SpanLogprobs {
    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.total() / self.0.len() as f64
        }
    }

    /// Mean per token when `normalize`, otherwise the sum.
    pub fn aggregate(&self, normalize: bool) -> f64 {
        if normalize {
            self.mean()
        } else {
            self.total()
        }
    }
}

pub trait Backend: Send + Sync {
    fn model_tag(&self) -> &str;

    /// Per-token log-probabilities of the query text given the ordered context.
    fn query_logprobs(&self, query: &Query, context: &[&Passage]) -> Result<SpanLogprobs, BackendError>;

    /// Per-token log-probabilities of the `target` passages' text, following `preceding`.
    fn context_logprobs(&self, preceding: &[&Passage], target: &[&Passage]) -> Result<SpanLogprobs, BackendError>;

    /// Greedy answer for the query given the ordered context.
    fn generate(&self, query: &Query, context: &[&Passage]) -> Result<String, BackendError>;

    fn first_token_distribution(&self, query: &Query, context: &[&Passage]) -> Result<TokenDistribution, BackendError>;

    /// Whether [`Backend::query_logprobs`] returns genuine per-token probabilities.
    fn token_probabilities(&self) -> bool;

    /// Requests issued to the underlying model so far.
    fn calls(&self) -> usize {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendOptions {
    /// Add the context log-prior to the permutation score.
    pub include_prior: bool,
    /// Use the mean per-token log-probability instead of the sum.
    pub length_normalize: bool,
    pub max_concurrency: usize,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub retry_budget: u32,
}

impl Default for BackendOptions {
    fn default() -> Self {
        Self {
            include_prior: false,
            length_normalize: true,
            max_concurrency: 4,
            timeout: Duration::from_secs(60),
            retry_budget: 2,
        }
    }
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// One permutation and the generator's score for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPermutation {
    pub permutation: Permutation,
    pub log_likelihood: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_prior: Option<f64>,
    pub model_tag: String,
    #[serde(default, skip_serializing)]
    pub from_cache: bool,
}

impl ScoredPermutation {
    /// The score fed to the solver: log-likelihood plus the log-prior when present.
    pub fn score(&self) -> f64 {
        self.log_likelihood + self.log_prior.unwrap_or(0.0)
    }
}

/// Probability of each candidate first token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution(pub BTreeMap<String, f64>);

impl TokenDistribution {
    pub fn point_mass(token: impl Into<String>) -> Self {
        Self(BTreeMap::from([(token.into(), 1.0)]))
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(weights: BTreeMap<String, f64>) -> Result<Self, BackendError> {
        let total: f64 = weights.values().sum();
        if !(total > 0.0) || weights.values().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(BackendError::Protocol("token weights must be finite, nonnegative, not all zero".into()));
        }
        Ok(Self(weights.into_iter().map(|(k, w)| (k, w / total)).collect()))
    }

    pub fn is_valid(&self) -> bool {
        let total: f64 = self.0.values().sum();
        self.0.values().all(|p| (0.0..=1.0).contains(p)) && (total - 1.0).abs() <= 1e-9
    }

    pub fn get(&self, token: &str) -> f64 {
        self.0.get(token).copied().unwrap_or(0.0)
    }
}

/// L1 distance between two first-token distributions, in `[0, 2]`.
pub fn perm_distance(d1: &TokenDistribution, d2: &TokenDistribution) -> f64 {
    let mut total = 0.0;
    for (tok, p) in &d1.0 {
        total += (p - d2.get(tok)).abs();
    }
    for (tok, q) in &d2.0 {
        if !d1.0.contains_key(tok) {
            total += q;
        }
    }
    total
}

fn cache_key(backend: &dyn Backend, query: &Query, context: &[&Passage], opts: &BackendOptions) -> CacheKey {
    CacheKey {
        model_tag: backend.model_tag().to_string(),
        query_id: query.id.clone(),
        passage_ids: context.iter().map(|p| p.id.clone()).collect(),
        include_prior: opts.include_prior,
        length_normalize: opts.length_normalize,
    }
}

/// Scores one permutation of `list`.
pub fn score_permutation(
    backend: &dyn Backend,
    query: &Query,
    list: &RetrievalList,
    perm: &Permutation,
    opts: &BackendOptions,
) -> Result<ScoredPermutation, BackendError> {
    score_with_cache(backend, query, list, perm, opts, None)
}

fn score_with_cache(
    backend: &dyn Backend,
    query: &Query,
    list: &RetrievalList,
    perm: &Permutation,
    opts: &BackendOptions,
    cache: Option<&ScoreCache>,
) -> Result<ScoredPermutation, BackendError> {
    let context = apply_permutation(list, perm).map_err(|e| BackendError::Permutation(e.to_string()))?;
    let key = cache.map(|_| cache_key(backend, query, &context, opts));
    if let (Some(cache), Some(key)) = (cache, key.as_ref()) {
        if let Some(hit) = cache.get(key) {
            return Ok(ScoredPermutation {
                permutation: perm.clone(),
                from_cache: true,
                ..hit
            });
        }
    }
    let log_likelihood = backend.query_logprobs(query, &context)?.aggregate(opts.length_normalize);
    let log_prior = if opts.include_prior {
        Some(backend.context_logprobs(&[], &context)?.aggregate(opts.length_normalize))
    } else {
        None
    };
    if !log_likelihood.is_finite() || log_prior.is_some_and(|p| !p.is_finite()) {
        return Err(BackendError::Protocol("non-finite log-probability".into()));
    }
    let scored = ScoredPermutation {
        permutation: perm.clone(),
        log_likelihood,
        log_prior,
        model_tag: backend.model_tag().to_string(),
        from_cache: false,
    };
    if let (Some(cache), Some(key)) = (cache, key) {
        cache
            .insert(key, &scored)
            .map_err(|e| BackendError::Other(format!("score cache write failed: {e}")))?;
    }
    Ok(scored)
}

/// Some permutations of a batch could not be scored.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{} of {} permutations failed to score (first: {})", .failures.len(), .completed.len(), .failures[0].1)]
pub struct BatchError {
    /// `(design index, error)` for each failure, in design order.
    pub failures: Vec<(usize, BackendError)>,
    /// Results in design order; `None` where scoring failed.
    pub completed: Vec<Option<ScoredPermutation>>,
}

/// Runs `task(i)` for `i in 0..len` on at most `max_concurrency` threads, returning results in index order.
pub(crate) fn fan_out<T: Send>(len: usize, max_concurrency: usize, task: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = max_concurrency.max(1).min(len);
    if workers <= 1 {
        return (0..len).map(task).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..len).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= len {
                    break;
                }
                let out = task(i);
                slots.lock().expect("result slots poisoned")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|s| s.expect("every index was processed"))
        .collect()
}

/// Scores every permutation of `design`, keeping design order.
pub fn score_batch(
    backend: &dyn Backend,
    query: &Query,
    list: &RetrievalList,
    design: &PermutationDesign,
    opts: &BackendOptions,
    cache: Option<&ScoreCache>,
) -> Result<Vec<ScoredPermutation>, BatchError> {
    let results = fan_out(design.len(), opts.max_concurrency, |i| {
        score_with_cache(backend, query, list, &design.permutations[i], opts, cache)
    });
    let mut failures = Vec::new();
    let mut completed = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => completed.push(Some(s)),
            Err(e) => {
                failures.push((i, e));
                completed.push(None);
            }
        }
    }
    if failures.is_empty() {
        Ok(completed.into_iter().map(|s| s.expect("no failures")).collect())
    } else {
        Err(BatchError { failures, completed })
    }
}

/// Greedy answer for the query over `ordered` passages.
pub fn generate(backend: &dyn Backend, query: &Query, ordered: &[&Passage]) -> Result<String, BackendError> {
    if ordered.is_empty() {
        return Err(BackendError::EmptyContext);
    }
    let answer = backend.generate(query, ordered)?;
    if answer.trim().is_empty() {
        return Err(BackendError::EmptyGeneration);
    }
    Ok(answer)
}

/// First-token distribution for the permuted list.
pub fn first_token_distribution(
    backend: &dyn Backend,
    query: &Query,
    list: &RetrievalList,
    perm: &Permutation,
) -> Result<TokenDistribution, BackendError> {
    let context = apply_permutation(list, perm).map_err(|e| BackendError::Permutation(e.to_string()))?;
    backend.first_token_distribution(query, &context)
}
