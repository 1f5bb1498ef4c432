//! End-to-end reranking: design, score, fit, rank.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{fan_out, generate, score_batch, Backend, BackendError, BackendOptions, BatchError, ScoreCache};
use crate::eval::{normalize_answer, normalize_text};
use crate::permute::{
    cyclic_design, pruned_cyclic_design, random_design, variable_pruned_design, PermutationDesign, PermuteError,
};
use crate::solver::{fit, DisentangledModel, SolverConfig, SolverError};
use crate::types::{apply_permutation, Ranking, RetrievalList, ValidationReport};

/// Which permutations to score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DesignChoice {
    /// `3N` distinct random permutations (capped at `N!`).
    Random3N,
    Cyclic,
    PrunedCyclic { l: usize },
    VariablePruned { tau: f64 },
}

impl fmt::Display for DesignChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DesignChoice::Random3N => write!(f, "random3n"),
            DesignChoice::Cyclic => write!(f, "cyclic"),
            DesignChoice::PrunedCyclic { l } => write!(f, "pruned_cyclic(L={l})"),
            DesignChoice::VariablePruned { tau } => write!(f, "variable_pruned(tau={tau})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankStrategy {
    pub design: DesignChoice,
    pub solver: SolverConfig,
    pub backend_opts: BackendOptions,
    /// Seed for random designs.
    pub design_seed: u64,
}

impl RerankStrategy {
    pub fn new(design: DesignChoice) -> Self {
        Self {
            design,
            solver: SolverConfig::default(),
            backend_opts: BackendOptions::default(),
            design_seed: 0,
        }
    }

    /// Same strategy with both seeds replaced.
    pub fn reseeded(&self, design_seed: u64, solver_seed: u64) -> Self {
        let mut s = self.clone();
        s.design_seed = design_seed;
        s.solver.seed = solver_seed;
        s
    }

    pub fn build_design(&self, list: &RetrievalList) -> Result<PermutationDesign, PermuteError> {
        let n = list.len();
        match self.design {
            DesignChoice::Random3N => random_design(n, None, self.design_seed),
            DesignChoice::Cyclic => cyclic_design(n),
            DesignChoice::PrunedCyclic { l } => pruned_cyclic_design(n, l),
            DesignChoice::VariablePruned { tau } => variable_pruned_design(list, tau),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("invalid retrieval list: {0}")]
    Invalid(#[from] ValidationReport),
    #[error(transparent)]
    Design(#[from] PermuteError),
    #[error(transparent)]
    Scoring(#[from] BatchError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("self-consistency needs k >= 1")]
    ZeroVotes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutcome {
    pub ranking: Ranking,
    pub model: DisentangledModel,
    pub design: PermutationDesign,
    pub scores: Vec<f64>,
    /// Scores served from the cache.
    pub cached: usize,
}

/// Reranks `list` by fitted utility.
pub fn pid_rerank(
    backend: &dyn Backend,
    list: &RetrievalList,
    strategy: &RerankStrategy,
    cache: Option<&ScoreCache>,
) -> Result<RerankOutcome, PipelineError> {
    list.validate()?;
    let design = strategy.build_design(list)?;
    let scored = score_batch(backend, &list.query, list, &design, &strategy.backend_opts, cache)?;
    let cached = scored.iter().filter(|s| s.from_cache).count();
    let scores: Vec<f64> = scored.iter().map(|s| s.score()).collect();
    let model = fit(&design, &scores, &strategy.solver)?;
    let mut ranking = Ranking::by_utility(list, &model.utility.0, format!("pid:{}", strategy.design));
    ranking.degenerate = model.degenerate;
    Ok(RerankOutcome {
        ranking,
        model,
        design,
        scores,
        cached,
    })
}

/// Generates an answer from every passage of `list` in `ranking` order.
pub fn answer_with(backend: &dyn Backend, list: &RetrievalList, ranking: &Ranking) -> Result<String, BackendError> {
    let ordered = ranking
        .ordered_passages(list)
        .ok_or_else(|| BackendError::Other("ranking names a passage outside the list".into()))?;
    generate(backend, &list.query, &ordered)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    /// Winning normalized answer.
    pub answer: String,
    pub counts: BTreeMap<String, usize>,
}

/// Majority vote over answers generated from `k` random orderings (capped at `N!`).
pub fn self_consistency(
    backend: &dyn Backend,
    list: &RetrievalList,
    k: usize,
    seed: u64,
    opts: &BackendOptions,
) -> Result<Vote, PipelineError> {
    if k == 0 {
        return Err(PipelineError::ZeroVotes);
    }
    list.validate()?;
    let design = random_design(list.len(), Some(k), seed)?;
    let answers = fan_out(design.len(), opts.max_concurrency, |i| {
        let ordered = apply_permutation(list, &design.permutations[i])
            .map_err(|e| BackendError::Permutation(e.to_string()))?;
        generate(backend, &list.query, &ordered)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(majority(answers.iter().map(String::as_str)))
}

/// Voting key: the normalized answer, or the article-preserving form when
/// normalization would leave nothing (an answer like "A").
fn vote_key(answer: &str) -> String {
    let key = normalize_answer(answer);
    if key.is_empty() {
        normalize_text(answer)
    } else {
        key
    }
}

/// Most frequent normalized answer; ties go to the lexicographically smallest.
pub fn majority<'a>(answers: impl IntoIterator<Item = &'a str>) -> Vote {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(vote_key(a)).or_default() += 1;
    }
    // BTreeMap iterates in ascending order, so the first maximum wins ties
    let mut answer = String::new();
    let mut best = 0;
    for (a, &c) in &counts {
        if c > best {
            best = c;
            answer = a.clone();
        }
    }
    Vote { answer, counts }
}

const REVERSED: &str = "reversed:";

/// The same passages in the opposite order. Reversing twice restores the original.
pub fn reverse_ranking(r: &Ranking) -> Ranking {
    let mut passage_ids = r.passage_ids.clone();
    passage_ids.reverse();
    let utilities = r.utilities.clone().map(|mut u| {
        u.reverse();
        u
    });
    let provenance = match r.provenance.strip_prefix(REVERSED) {
        Some(orig) => orig.to_string(),
        None => format!("{REVERSED}{}", r.provenance),
    };
    Ranking {
        passage_ids,
        utilities,
        provenance,
        degenerate: r.degenerate,
    }
}

/// One line of a rankings file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub query_id: String,
    pub strategy: String,
    pub passage_ids: Vec<String>,
    #[serde(default)]
    pub utilities: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

impl RankingRecord {
    pub fn from_ranking(query_id: impl Into<String>, ranking: &Ranking) -> Self {
        Self {
            query_id: query_id.into(),
            strategy: ranking.provenance.clone(),
            passage_ids: ranking.passage_ids.clone(),
            utilities: ranking.utilities.clone(),
            bias: None,
            residual: None,
            degenerate: ranking.degenerate,
            answer: None,
        }
    }

    pub fn from_outcome(query_id: impl Into<String>, outcome: &RerankOutcome) -> Self {
        Self {
            bias: Some(outcome.model.bias.0.clone()),
            residual: Some(outcome.model.residual_sse),
            ..Self::from_ranking(query_id, &outcome.ranking)
        }
    }

    pub fn ranking(&self) -> Ranking {
        Ranking {
            passage_ids: self.passage_ids.clone(),
            utilities: self.utilities.clone(),
            provenance: self.strategy.clone(),
            degenerate: self.degenerate,
        }
    }
}
