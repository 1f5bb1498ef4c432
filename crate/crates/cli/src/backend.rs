use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{Context, Result};

use permrank_core::backend::{
    Backend, BackendError, RemoteBackend, RemoteConfig, SimulatedBackend, SpanLogprobs, TokenDistribution,
};
use permrank_core::ingest::load_truth;
use permrank_core::{seed, Passage, Query, RetrievalList};

use crate::config::{BackendChoice, RunConfig};

/// Builds the configured backend for `lists`.
pub fn build(cfg: &RunConfig, lists: &[RetrievalList]) -> Result<Box<dyn Backend>> {
    match &cfg.backend {
        BackendChoice::Sim { truth, noise } => {
            let truth = truth.as_ref().context("the sim backend needs --truth <sidecar>")?;
            let truth = load_truth(truth).with_context(|| format!("loading truth sidecar {}", truth.display()))?;
            let mut oracles = HashMap::new();
            for list in lists {
                let Some(t) = truth.get(&list.query.id) else {
                    continue;
                };
                match t.oracle(list) {
                    Ok(o) => {
                        let o = o.with_noise(*noise, seed::derive_seed(cfg.seed, &format!("noise:{}", list.query.id)));
                        oracles.insert(list.query.id.clone(), o);
                    }
                    Err(e) => log::warn!("query {}: unusable truth record: {e}", list.query.id),
                }
            }
            Ok(Box::new(SimulatedBackend::with_oracles(oracles)))
        }
        BackendChoice::Remote { endpoint, model, api_key } => {
            let mut rc = RemoteConfig::new(endpoint.clone(), model.clone()).with_options(&cfg.backend_opts);
            rc.api_key = api_key.clone();
            Ok(Box::new(RemoteBackend::new(rc)))
        }
    }
}

/// Counts the model requests made through it.
pub struct Counting<'a> {
    inner: &'a dyn Backend,
    calls: AtomicUsize,
}

impl<'a> Counting<'a> {
    pub fn new(inner: &'a dyn Backend) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    fn tick(&self) {
        self.calls.fetch_add(1, Ordering::Relaxed);
    }
}

impl Backend for Counting<'_> {
    fn model_tag(&self) -> &str {
        self.inner.model_tag()
    }

    fn query_logprobs(&self, query: &Query, context: &[&Passage]) -> Result<SpanLogprobs, BackendError> {
        self.tick();
        self.inner.query_logprobs(query, context)
    }

    fn context_logprobs(&self, preceding: &[&Passage], target: &[&Passage]) -> Result<SpanLogprobs, BackendError> {
        self.tick();
        self.inner.context_logprobs(preceding, target)
    }

    fn generate(&self, query: &Query, context: &[&Passage]) -> Result<String, BackendError> {
        self.tick();
        self.inner.generate(query, context)
    }

    fn first_token_distribution(&self, query: &Query, context: &[&Passage]) -> Result<TokenDistribution, BackendError> {
        self.tick();
        self.inner.first_token_distribution(query, context)
    }

    fn token_probabilities(&self) -> bool {
        self.inner.token_probabilities()
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}
