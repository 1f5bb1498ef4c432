//! Run configuration: command-line flags override the TOML config file, which
//! overrides `PERMRANK_*` environment variables, which override defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Deserialize;

use permrank_core::backend::BackendOptions;
use permrank_core::pipeline::DesignChoice;
use permrank_core::solver::SolverConfig;

pub const ENV_ENDPOINT: &str = "PERMRANK_ENDPOINT";
pub const ENV_MODEL: &str = "PERMRANK_MODEL";
pub const ENV_API_KEY: &str = "PERMRANK_API_KEY";
pub const ENV_CONCURRENCY: &str = "PERMRANK_CONCURRENCY";
pub const ENV_TIMEOUT: &str = "PERMRANK_TIMEOUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Sim,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum DesignKind {
    Random3n,
    Cyclic,
    Pruned,
    Variable,
}

/// Contents of `--config FILE`. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub cache: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub backend: FileBackend,
    #[serde(default)]
    pub strategy: FileStrategy,
    pub solver: Option<SolverConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileBackend {
    pub kind: Option<BackendKind>,
    pub truth: Option<PathBuf>,
    pub noise: Option<f64>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub timeout_secs: Option<f64>,
    pub retry_budget: Option<u32>,
    pub max_concurrency: Option<usize>,
    pub include_prior: Option<bool>,
    pub length_normalize: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileStrategy {
    pub design: Option<DesignKind>,
    pub l: Option<usize>,
    pub tau: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flags shared by every command that talks to a generator.
#[derive(Debug, Clone, Default, Args)]
pub struct BackendArgs {
    /// Generator backend [default: sim]
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Ground-truth sidecar driving the simulated backend
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Gaussian noise added to simulated scores
    #[arg(long)]
    pub noise: Option<f64>,
    /// Completion endpoint base URL (env PERMRANK_ENDPOINT)
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model name sent to the endpoint (env PERMRANK_MODEL)
    #[arg(long)]
    pub model: Option<String>,
    /// Bearer token for the endpoint (env PERMRANK_API_KEY)
    #[arg(long)]
    pub api_key: Option<String>,
    /// Request timeout in seconds (env PERMRANK_TIMEOUT) [default: 60]
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Retries for transient endpoint failures [default: 2]
    #[arg(long)]
    pub retries: Option<u32>,
    /// Concurrent scoring requests per query (env PERMRANK_CONCURRENCY) [default: 4]
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Add the context log-prior to each permutation score
    #[arg(long)]
    pub include_prior: bool,
    /// Sum token log-probabilities instead of averaging them
    #[arg(long)]
    pub sum_logprobs: bool,
    /// JSONL score cache
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

/// Flags shared by every command that runs over a corpus.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Dataset JSONL
    #[arg(long = "in", value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Output JSONL (stdout when omitted)
    #[arg(long = "out", value_name = "PATH")]
    pub output: Option<PathBuf>,
    /// Top-level seed; per-query seeds are derived from it [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Queries processed concurrently [default: 1]
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Exit 0 even if some queries failed
    #[arg(long)]
    pub keep_going: bool,
}

#[derive(Debug, Clone)]
pub enum BackendChoice {
    /// `truth` is required only by commands that query the generator.
    Sim { truth: Option<PathBuf>, noise: f64 },
    Remote { endpoint: String, model: String, api_key: Option<String> },
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub backend: BackendChoice,
    pub backend_opts: BackendOptions,
    pub cache: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub jobs: usize,
    pub keep_going: bool,
    pub solver: SolverConfig,
    pub design: Option<DesignChoice>,
}

fn env(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

fn env_parse<T: std::str::FromStr>(name: &str) -> Result<Option<T>> {
    match env(name) {
        None => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|_| anyhow::anyhow!("{name}={v:?} is not valid")),
    }
}

impl RunConfig {
    pub fn resolve(file: &FileConfig, b: &BackendArgs, r: &RunArgs) -> Result<Self> {
        let fb = &file.backend;
        let kind = b.backend.or(fb.kind).unwrap_or(BackendKind::Sim);
        let backend = match kind {
            BackendKind::Sim => {
                let truth = b.truth.clone().or_else(|| fb.truth.clone());
                let noise = b.noise.or(fb.noise).unwrap_or(0.0);
                if !noise.is_finite() || noise < 0.0 {
                    bail!("--noise must be nonnegative");
                }
                BackendChoice::Sim { truth, noise }
            }
            BackendKind::Remote => {
                let endpoint = b
                    .endpoint
                    .clone()
                    .or_else(|| fb.endpoint.clone())
                    .or_else(|| env(ENV_ENDPOINT))
                    .context("the remote backend needs --endpoint or PERMRANK_ENDPOINT")?;
                let model = b
                    .model
                    .clone()
                    .or_else(|| fb.model.clone())
                    .or_else(|| env(ENV_MODEL))
                    .unwrap_or_else(|| "default".to_string());
                let api_key = b.api_key.clone().or_else(|| fb.api_key.clone()).or_else(|| env(ENV_API_KEY));
                BackendChoice::Remote { endpoint, model, api_key }
            }
        };

        let defaults = BackendOptions::default();
        let timeout = b
            .timeout
            .or(fb.timeout_secs)
            .or(env_parse(ENV_TIMEOUT)?)
            .unwrap_or(defaults.timeout.as_secs_f64());
        if !timeout.is_finite() || timeout <= 0.0 {
            bail!("timeout must be a positive number of seconds");
        }
        let max_concurrency = b
            .concurrency
            .or(fb.max_concurrency)
            .or(env_parse(ENV_CONCURRENCY)?)
            .unwrap_or(defaults.max_concurrency);
        if max_concurrency == 0 {
            bail!("concurrency must be at least 1");
        }
        let backend_opts = BackendOptions {
            include_prior: b.include_prior || fb.include_prior.unwrap_or(defaults.include_prior),
            length_normalize: !b.sum_logprobs && fb.length_normalize.unwrap_or(defaults.length_normalize),
            max_concurrency,
            timeout: Duration::from_secs_f64(timeout),
            retry_budget: b.retries.or(fb.retry_budget).unwrap_or(defaults.retry_budget),
        };

        let jobs = r.jobs.or(file.jobs).unwrap_or(1);
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        Ok(Self {
            backend,
            backend_opts,
            cache: b.cache.clone().or_else(|| file.cache.clone()),
            input: r.input.clone().or_else(|| file.input.clone()),
            output: r.output.clone().or_else(|| file.output.clone()),
            seed: r.seed.or(file.seed).unwrap_or(0),
            jobs,
            keep_going: r.keep_going,
            solver: file.solver.clone().unwrap_or_default(),
            design: None,
        })
    }

    pub fn with_design(mut self, file: &FileConfig, kind: Option<DesignKind>, l: Option<usize>, tau: Option<f64>) -> Result<Self> {
        let fs = &file.strategy;
        let kind = kind.or(fs.design).unwrap_or(DesignKind::Random3n);
        self.design = Some(match kind {
            DesignKind::Random3n => DesignChoice::Random3N,
            DesignKind::Cyclic => DesignChoice::Cyclic,
            DesignKind::Pruned => DesignChoice::PrunedCyclic {
                l: l.or(fs.l).context("--design pruned needs --L")?,
            },
            DesignKind::Variable => DesignChoice::VariablePruned {
                tau: tau.or(fs.tau).context("--design variable needs --tau")?,
            },
        });
        Ok(self)
    }
}
