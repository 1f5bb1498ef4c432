//! `permrank`: rerank retrieved passages by scoring permuted prompts and
//! separating passage utility from the generator's position bias.
//!
//! ```text
//! permrank synth --queries 100 --passages 5 --out synth.jsonl --truth-out truth.jsonl
//! permrank rerank --backend sim --truth truth.jsonl --design cyclic --in synth.jsonl --out ranks.jsonl
//! permrank eval --predictions ranks.jsonl --dataset synth.jsonl --metrics mrr
//! permrank bias-report --in ranks.jsonl --json bias.json --csv bias.csv
//! ```

mod backend;
mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};

use permrank_core::eval::Metric;

use commands::{Method, RandomMode};
use config::{BackendArgs, DesignKind, FileConfig, RunArgs, RunConfig};

#[derive(Parser)]
#[command(name = "permrank", version, about = "Permutation-based passage reranking for retrieval-augmented generation")]
struct Cli {
    /// TOML config file; command-line flags take precedence over it
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// More log output (-v info, -vv debug); RUST_LOG overrides
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rerank every query by fitted passage utility
    Rerank {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        backend: BackendArgs,
        /// Permutation design [default: random3n]
        #[arg(long, value_enum)]
        design: Option<DesignKind>,
        /// Prefix length for the pruned design
        #[arg(long = "L", value_name = "L")]
        l: Option<usize>,
        /// Retriever-score mass kept by the variable design
        #[arg(long)]
        tau: Option<f64>,
        /// Also generate an answer from the reranked context
        #[arg(long)]
        answer: bool,
    },
    /// Run a comparison reranker or answer aggregator
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, value_enum)]
        method: Method,
        /// Orderings sampled by self_consistency and by random in average mode
        #[arg(long, default_value_t = 30)]
        k: usize,
        #[arg(long, value_enum, default_value_t = RandomMode::Single)]
        random_mode: RandomMode,
    },
    /// Score predictions against a dataset
    Eval {
        /// Ranking JSONL produced by rerank or baseline
        #[arg(long, value_name = "PATH")]
        predictions: PathBuf,
        /// Dataset JSONL with gold answers and gold passage ids
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Ground-truth sidecar supplying gold passages the dataset lacks
        #[arg(long, value_name = "PATH")]
        truth: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "em,rouge_l,mrr")]
        metrics: Vec<Metric>,
        /// Report path (stdout when omitted)
        #[arg(long = "out", value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Average the fitted position-bias profiles of a rerank run
    BiasReport {
        /// Ranking JSONL written by rerank
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        /// JSON report path (stdout when omitted)
        #[arg(long, value_name = "PATH")]
        json: Option<PathBuf>,
        /// CSV report path
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Score random orderings with a teacher to build a distillation set
    DistillBuild {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        backend: BackendArgs,
        /// Orderings per query (capped at N!)
        #[arg(long, default_value_t = 30)]
        k: usize,
    },
    /// Write a synthetic corpus and its ground-truth sidecar
    Synth {
        #[arg(long, default_value_t = 100)]
        queries: usize,
        #[arg(long, default_value_t = 5)]
        passages: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Std of the noise separating retriever scores from utilities [default: 1.0]
        #[arg(long)]
        retriever_noise: Option<f64>,
        #[arg(long = "out", value_name = "PATH")]
        output: PathBuf,
        #[arg(long = "truth-out", value_name = "PATH")]
        truth_output: PathBuf,
    },
    /// Inspect or empty the score cache
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    /// Print entry count and file size
    Stats {
        #[arg(long, value_name = "PATH")]
        cache: Option<PathBuf>,
    },
    /// Delete every cached score
    Clear {
        #[arg(long, value_name = "PATH")]
        cache: Option<PathBuf>,
    },
}

fn usage_error(message: &str) -> ! {
    Cli::command().error(ErrorKind::MissingRequiredArgument, message).exit()
}

fn required<'a>(path: Option<&'a Path>, what: &str) -> &'a Path {
    path.unwrap_or_else(|| usage_error(&format!("no {what} given; pass it as a flag or in --config")))
}

fn run(cli: Cli) -> Result<u8> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Rerank {
            run,
            backend,
            design,
            l,
            tau,
            answer,
        } => {
            let cfg = RunConfig::resolve(&file, &backend, &run)?.with_design(&file, design, l, tau)?;
            commands::rerank(&cfg, required(cfg.input.as_deref(), "dataset (--in)"), answer)
        }
        Command::Baseline {
            run,
            backend,
            method,
            k,
            random_mode,
        } => {
            let cfg = RunConfig::resolve(&file, &backend, &run)?;
            commands::baseline(&cfg, required(cfg.input.as_deref(), "dataset (--in)"), method, k, random_mode)
        }
        Command::Eval {
            predictions,
            dataset,
            truth,
            metrics,
            output,
        } => {
            let dataset = dataset.or(file.input);
            let truth = truth.or(file.backend.truth);
            commands::eval(
                &predictions,
                required(dataset.as_deref(), "dataset (--dataset)"),
                truth.as_deref(),
                &metrics,
                output.as_deref(),
            )
        }
        Command::BiasReport { input, json, csv } => commands::bias_report(&input, json.as_deref(), csv.as_deref()),
        Command::DistillBuild { run, backend, k } => {
            let cfg = RunConfig::resolve(&file, &backend, &run)?;
            commands::distill_build(&cfg, required(cfg.input.as_deref(), "dataset (--in)"), k)
        }
        Command::Synth {
            queries,
            passages,
            seed,
            retriever_noise,
            output,
            truth_output,
        } => commands::synth(queries, passages, seed, retriever_noise, &output, &truth_output),
        Command::Cache { action } => match action {
            CacheAction::Stats { cache } => {
                let cache = cache.or(file.cache);
                commands::cache_stats(required(cache.as_deref(), "cache (--cache)"))
            }
            CacheAction::Clear { cache } => {
                let cache = cache.or(file.cache);
                commands::cache_clear(required(cache.as_deref(), "cache (--cache)"))
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
