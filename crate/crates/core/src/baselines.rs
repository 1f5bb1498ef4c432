//! Pointwise and greedy listwise reranking baselines.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{fan_out, Backend, BackendError, BackendOptions};
use crate::types::{Passage, Query, Ranking, RetrievalList};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointwiseMethod {
    BayesSaliency,
    Qg,
    Lingua,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseScore {
    pub passage_id: String,
    pub score: f64,
    pub method: PointwiseMethod,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no score for passage {0}")]
    MissingScore(String),
    #[error("passage {0} scored more than once")]
    DuplicateScore(String),
    #[error("score for unknown passage {0}")]
    UnknownPassage(String),
    #[error("non-finite score for passage {0}")]
    NonFinite(String),
}

fn finite(passage: &Passage, score: f64, method: PointwiseMethod) -> Result<PointwiseScore, BackendError> {
    if !score.is_finite() {
        return Err(BackendError::Protocol(format!("non-finite score for passage {}", passage.id)));
    }
    Ok(PointwiseScore {
        passage_id: passage.id.clone(),
        score,
        method,
    })
}

/// `log P(q | p)`, plus `log P(p)` when `include_prior`.
pub fn bayes_saliency(
    backend: &dyn Backend,
    query: &Query,
    passage: &Passage,
    include_prior: bool,
    opts: &BackendOptions,
) -> Result<PointwiseScore, BackendError> {
    if query.text.trim().is_empty() {
        return Err(BackendError::EmptyQuery);
    }
    let mut score = backend.query_logprobs(query, &[passage])?.aggregate(opts.length_normalize);
    if include_prior {
        score += backend.context_logprobs(&[], &[passage])?.aggregate(opts.length_normalize);
    }
    finite(passage, score, PointwiseMethod::BayesSaliency)
}

/// Query likelihood given the single passage.
pub fn qg_score(
    backend: &dyn Backend,
    query: &Query,
    passage: &Passage,
    opts: &BackendOptions,
) -> Result<PointwiseScore, BackendError> {
    let s = bayes_saliency(backend, query, passage, false, opts)?;
    Ok(PointwiseScore {
        method: PointwiseMethod::Qg,
        ..s
    })
}

/// `Σ_l p_l ln p_l` over the query tokens, `p_l` being each token's probability.
pub fn lingua_score(backend: &dyn Backend, query: &Query, passage: &Passage) -> Result<PointwiseScore, BackendError> {
    if !backend.token_probabilities() {
        return Err(BackendError::TokenProbabilitiesUnsupported);
    }
    if query.text.trim().is_empty() {
        return Err(BackendError::EmptyQuery);
    }
    let lps = backend.query_logprobs(query, &[passage])?;
    finite(passage, entropy_term(&lps.0), PointwiseMethod::Lingua)
}

/// `Σ exp(l)·l`, with `l = -inf` contributing 0.
pub fn entropy_term(logprobs: &[f64]) -> f64 {
    logprobs
        .iter()
        .map(|&l| {
            let l = l.min(0.0);
            if l == f64::NEG_INFINITY {
                0.0
            } else {
                l.exp() * l
            }
        })
        .sum()
}

/// Scores every passage of `list` with `method`, in retriever order.
pub fn pointwise_scores(
    backend: &dyn Backend,
    list: &RetrievalList,
    method: PointwiseMethod,
    include_prior: bool,
    opts: &BackendOptions,
) -> Result<Vec<PointwiseScore>, BackendError> {
    fan_out(list.len(), opts.max_concurrency, |i| {
        let p = &list.passages[i];
        match method {
            PointwiseMethod::BayesSaliency => bayes_saliency(backend, &list.query, p, include_prior, opts),
            PointwiseMethod::Qg => qg_score(backend, &list.query, p, opts),
            PointwiseMethod::Lingua => lingua_score(backend, &list.query, p),
        }
    })
    .into_iter()
    .collect()
}

/// Orders passages by descending score, ties by retriever rank.
pub fn rank_by_pointwise(
    scores: &[PointwiseScore],
    list: &RetrievalList,
    provenance: impl Into<String>,
) -> Result<Ranking, BaselineError> {
    let mut by_id: HashMap<&str, f64> = HashMap::new();
    for s in scores {
        if !list.passages.iter().any(|p| p.id == s.passage_id) {
            return Err(BaselineError::UnknownPassage(s.passage_id.clone()));
        }
        if !s.score.is_finite() {
            return Err(BaselineError::NonFinite(s.passage_id.clone()));
        }
        if by_id.insert(&s.passage_id, s.score).is_some() {
            return Err(BaselineError::DuplicateScore(s.passage_id.clone()));
        }
    }
    let values = list
        .passages
        .iter()
        .map(|p| by_id.get(p.id.as_str()).copied().ok_or_else(|| BaselineError::MissingScore(p.id.clone())))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(Ranking::by_utility(list, &values, provenance))
}

/// Greedy listwise selection: each step appends the passage that maximizes the
/// query likelihood given the passages chosen so far, plus its context prior
/// when `opts.include_prior`. Makes `N(N+1)/2` candidate evaluations.
pub fn bayes_saliency_listwise(
    backend: &dyn Backend,
    list: &RetrievalList,
    opts: &BackendOptions,
) -> Result<Ranking, BackendError> {
    if list.query.text.trim().is_empty() {
        return Err(BackendError::EmptyQuery);
    }
    let mut selected: Vec<&Passage> = Vec::with_capacity(list.len());
    let mut remaining: Vec<&Passage> = list.passages.iter().collect();
    while !remaining.is_empty() {
        let scores = fan_out(remaining.len(), opts.max_concurrency, |i| {
            let candidate = remaining[i];
            let mut context = selected.clone();
            context.push(candidate);
            let mut s = backend.query_logprobs(&list.query, &context)?.aggregate(opts.length_normalize);
            if opts.include_prior {
                s += backend.context_logprobs(&selected, &[candidate])?.aggregate(opts.length_normalize);
            }
            Ok::<f64, BackendError>(s)
        })
        .into_iter()
        .collect::<Result<Vec<f64>, _>>()?;
        // strict > keeps the earlier retriever rank on ties
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        selected.push(remaining.remove(best));
    }
    Ok(Ranking {
        passage_ids: selected.iter().map(|p| p.id.clone()).collect(),
        utilities: None,
        provenance: "listwise".into(),
        degenerate: false,
    })
}
