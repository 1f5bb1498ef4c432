//! A generator that follows the linear bias-utility model exactly.
//!
//! For a context `[p_1, .., p_L]` the simulated query log-likelihood is
//! `Σ_j a*_j u*[p_j] / Σ_{j<=L} a*_j`, plus optional Gaussian noise that is a
//! pure function of `(seed, query id, passage ids)`. Generation answers with
//! the token of the passage contributing most, `argmax_j a*_j · u*[p_j]`.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, SpanLogprobs, TokenDistribution};
use crate::seed;
use crate::types::{Passage, Query, RetrievalList};

/// Ground truth for one query, indexed by retriever rank - 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOracleConfig {
    pub a_star: Vec<f64>,
    pub u_star: Vec<f64>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Answer token per passage id; passages without an entry answer with their id.
    #[serde(default)]
    pub answer_vocab: BTreeMap<String, String>,
}

impl SimOracleConfig {
    pub fn new(a_star: Vec<f64>, u_star: Vec<f64>) -> Result<Self, BackendError> {
        let cfg = Self {
            a_star,
            u_star,
            noise_sigma: 0.0,
            seed: 0,
            answer_vocab: BTreeMap::new(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_noise(mut self, sigma: f64, seed: u64) -> Self {
        self.noise_sigma = sigma;
        self.seed = seed;
        self
    }

    pub fn with_vocab(mut self, vocab: BTreeMap<String, String>) -> Self {
        self.answer_vocab = vocab;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::Other(format!("invalid oracle: {m}")));
        if self.a_star.is_empty() || self.a_star.len() != self.u_star.len() {
            return bad("a* and u* must be non-empty and of equal length");
        }
        if self.a_star.iter().any(|a| !(*a >= 0.0)) || (self.a_star.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("a* must lie on the probability simplex");
        }
        if self.u_star.iter().any(|u| !u.is_finite()) {
            return bad("u* must be finite");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be nonnegative");
        }
        Ok(())
    }

    /// Answer token for each passage: whatever follows the last `answer:` in its
    /// text, else the passage id.
    pub fn vocab_from_passages(list: &RetrievalList) -> BTreeMap<String, String> {
        list.passages
            .iter()
            .map(|p| (p.id.clone(), answer_token(p)))
            .collect()
    }

    fn utility(&self, p: &Passage) -> Result<f64, BackendError> {
        self.u_star
            .get(p.retriever_rank.wrapping_sub(1))
            .copied()
            .ok_or_else(|| BackendError::Other(format!("passage rank {} outside oracle", p.retriever_rank)))
    }

    /// Noise-free score of an ordered context.
    pub fn expected_score(&self, context: &[&Passage]) -> Result<f64, BackendError> {
        if context.is_empty() || context.len() > self.a_star.len() {
            return Err(BackendError::EmptyContext);
        }
        let mass: f64 = self.a_star[..context.len()].iter().sum();
        let mut total = 0.0;
        for (aj, p) in self.a_star.iter().zip(context) {
            total += if mass > 0.0 { aj / mass } else { 1.0 / context.len() as f64 } * self.utility(p)?;
        }
        Ok(total)
    }

    fn answer_for(&self, p: &Passage) -> String {
        self.answer_vocab.get(&p.id).cloned().unwrap_or_else(|| p.id.clone())
    }
}

fn answer_token(p: &Passage) -> String {
    let lower = p.text.to_ascii_lowercase();
    match lower.rfind("answer:") {
        Some(at) => p.text[at + "answer:".len()..]
            .split_whitespace()
            .next()
            .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric() && c != '-' && c != '_').to_string())
            .filter(|t| !t.is_empty())
            .unwrap_or_else(|| p.id.clone()),
        None => p.id.clone(),
    }
}

/// Simulated generator holding one oracle per query id (or one shared default).
#[derive(Debug, Default)]
pub struct SimulatedBackend {
    tag: String,
    oracles: HashMap<String, SimOracleConfig>,
    fallback: Option<SimOracleConfig>,
    calls: AtomicUsize,
}

impl SimulatedBackend {
    /// One oracle applied to every query.
    pub fn new(oracle: SimOracleConfig) -> Self {
        Self {
            tag: "sim".into(),
            oracles: HashMap::new(),
            fallback: Some(oracle),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_oracles(oracles: HashMap<String, SimOracleConfig>) -> Self {
        Self {
            tag: "sim".into(),
            oracles,
            fallback: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    pub fn oracle(&self, query_id: &str) -> Result<&SimOracleConfig, BackendError> {
        self.oracles
            .get(query_id)
            .or(self.fallback.as_ref())
            .ok_or_else(|| BackendError::UnknownQuery(query_id.to_string()))
    }

    fn noisy_score(&self, query: &Query, context: &[&Passage]) -> Result<f64, BackendError> {
        let oracle = self.oracle(&query.id)?;
        let mut score = oracle.expected_score(context)?;
        if oracle.noise_sigma > 0.0 {
            let mut label = query.id.clone();
            for p in context {
                label.push('\u{1f}');
                label.push_str(&p.id);
            }
            let mut rng = seed::rng(seed::derive_seed(oracle.seed, &label));
            let normal = Normal::new(0.0, oracle.noise_sigma).expect("sigma validated");
            score += normal.sample(&mut rng);
        }
        Ok(score)
    }

    fn dominant<'a>(&self, query: &Query, context: &[&'a Passage]) -> Result<&'a Passage, BackendError> {
        let oracle = self.oracle(&query.id)?;
        let mut best: Option<(f64, &Passage)> = None;
        for (aj, p) in oracle.a_star.iter().zip(context) {
            let contribution = aj * oracle.utility(p)?;
            if best.is_none_or(|(b, _)| contribution > b) {
                best = Some((contribution, p));
            }
        }
        best.map(|(_, p)| p).ok_or(BackendError::EmptyContext)
    }
}

impl Backend for SimulatedBackend {
    fn model_tag(&self) -> &str {
        &self.tag
    }

    /// A single pseudo-token carrying the model score, so mean and sum agree.
    fn query_logprobs(&self, query: &Query, context: &[&Passage]) -> Result<SpanLogprobs, BackendError> {
        if query.text.trim().is_empty() {
            return Err(BackendError::EmptyQuery);
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(SpanLogprobs(vec![self.noisy_score(query, context)?]))
    }

    /// The simulated generator has no preference among contexts.
    fn context_logprobs(&self, _preceding: &[&Passage], target: &[&Passage]) -> Result<SpanLogprobs, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(SpanLogprobs(vec![0.0; target.len().max(1)]))
    }

    fn generate(&self, query: &Query, context: &[&Passage]) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let p = self.dominant(query, context)?;
        Ok(self.oracle(&query.id)?.answer_for(p))
    }

    fn first_token_distribution(&self, query: &Query, context: &[&Passage]) -> Result<TokenDistribution, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let p = self.dominant(query, context)?;
        Ok(TokenDistribution::point_mass(self.oracle(&query.id)?.answer_for(p)))
    }

    fn token_probabilities(&self) -> bool {
        false
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{first_token_distribution, generate, score_batch, score_permutation, BackendOptions};
    use crate::permute::{all_permutations, cyclic_design};
    use crate::types::{apply_permutation, Permutation};

    fn list(n: usize) -> RetrievalList {
        RetrievalList::new(
            Query::new("q", "what?"),
            (1..=n)
                .map(|k| Passage::new(format!("p{k}"), format!("text {k}. answer: tok{k}"), k))
                .collect(),
        )
    }

    fn sim(a: &[f64], u: &[f64]) -> SimulatedBackend {
        SimulatedBackend::new(SimOracleConfig::new(a.to_vec(), u.to_vec()).unwrap())
    }

    #[test]
    fn scores_are_the_weighted_sum() {
        let b = sim(&[0.5, 0.3, 0.2], &[3.0, 1.0, 2.0]);
        let l = list(3);
        let opts = BackendOptions::default();
        let s = score_permutation(&b, &l.query, &l, &Permutation::identity(3), &opts).unwrap();
        assert!((s.score() - 2.2).abs() < 1e-12);
        let s = score_permutation(&b, &l.query, &l, &Permutation::new(vec![2, 1, 3], 3).unwrap(), &opts).unwrap();
        assert!((s.score() - 1.8).abs() < 1e-12);
        assert_eq!(s.log_prior, None);
        assert!(!s.from_cache);
    }

    #[test]
    fn constant_utility_scores_constant() {
        let b = sim(&[0.1, 0.6, 0.3], &[4.0, 4.0, 4.0]);
        let l = list(3);
        for p in all_permutations(3) {
            let s = score_permutation(&b, &l.query, &l, &p, &BackendOptions::default()).unwrap();
            assert!((s.score() - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exhaustive_weighted_sum_up_to_six() {
        for n in 1..=6 {
            let a: Vec<f64> = (0..n).map(|j| (n - j) as f64).collect();
            let total: f64 = a.iter().sum();
            let a: Vec<f64> = a.iter().map(|x| x / total).collect();
            let u: Vec<f64> = (0..n).map(|k| ((k * 7) % 5) as f64 - 1.5).collect();
            let b = sim(&a, &u);
            let l = list(n);
            for p in all_permutations(n) {
                let got = score_permutation(&b, &l.query, &l, &p, &BackendOptions::default()).unwrap().score();
                let want: f64 = p.indices().iter().zip(&a).map(|(&k, aj)| aj * u[k - 1]).sum();
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_is_deterministic_per_context() {
        let oracle = SimOracleConfig::new(vec![0.6, 0.4], vec![1.0, 2.0]).unwrap().with_noise(0.5, 9);
        let b = SimulatedBackend::new(oracle);
        let l = list(2);
        let opts = BackendOptions::default();
        let d = cyclic_design(2).unwrap();
        let first = score_batch(&b, &l.query, &l, &d, &opts, None).unwrap();
        let second = score_batch(&b, &l.query, &l, &d, &opts, None).unwrap();
        assert_eq!(first, second);
        assert!((first[0].score() - (0.6 + 0.8)).abs() > 1e-6);
    }

    #[test]
    fn generation_follows_dominant_contribution() {
        let b = sim(&[0.7, 0.2, 0.1], &[3.0, 1.0, 2.0]).with_tag("sim-test");
        let l = list(3);
        let mut oracle = b.oracle("q").unwrap().clone();
        oracle.answer_vocab = SimOracleConfig::vocab_from_passages(&l);
        let b = SimulatedBackend::new(oracle);
        let ctx = apply_permutation(&l, &Permutation::identity(3)).unwrap();
        assert_eq!(generate(&b, &l.query, &ctx).unwrap(), "tok1");
        // p2 up front: 0.7 * 1 beats 0.2 * 3
        let ctx = apply_permutation(&l, &Permutation::new(vec![2, 1, 3], 3).unwrap()).unwrap();
        assert_eq!(generate(&b, &l.query, &ctx).unwrap(), "tok2");
        let single = apply_permutation(&l, &Permutation::new(vec![3], 3).unwrap()).unwrap();
        assert_eq!(generate(&b, &l.query, &single).unwrap(), "tok3");
        assert_eq!(generate(&b, &l.query, &[]), Err(BackendError::EmptyContext));

        let d = first_token_distribution(&b, &l.query, &l, &Permutation::identity(3)).unwrap();
        assert_eq!(d, TokenDistribution::point_mass("tok1"));
        assert!(d.is_valid());
    }

    #[test]
    fn answer_tokens_without_marker_fall_back_to_id() {
        let p = Passage::new("x9", "no marker here", 1);
        assert_eq!(answer_token(&p), "x9");
        let p = Passage::new("x9", "Foo. Answer: Paris.", 1);
        assert_eq!(answer_token(&p), "Paris");
    }

    #[test]
    fn unknown_query_is_an_error() {
        let b = SimulatedBackend::with_oracles(HashMap::new());
        let l = list(2);
        let err = score_permutation(&b, &l.query, &l, &Permutation::identity(2), &BackendOptions::default());
        assert_eq!(err.unwrap_err(), BackendError::UnknownQuery("q".into()));
    }

    #[test]
    fn invalid_oracles_are_rejected() {
        assert!(SimOracleConfig::new(vec![0.5, 0.6], vec![1.0, 2.0]).is_err());
        assert!(SimOracleConfig::new(vec![1.0], vec![1.0, 2.0]).is_err());
        assert!(SimOracleConfig::new(vec![1.2, -0.2], vec![1.0, 2.0]).is_err());
    }
}
