use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use rayon::prelude::*;
use serde::Serialize;

use permrank_core::backend::{Backend, ScoreCache};
use permrank_core::baselines::{bayes_saliency_listwise, pointwise_scores, rank_by_pointwise, PointwiseMethod};
use permrank_core::distill::build_distill_dataset;
use permrank_core::eval::{
    bias_report_from_profiles, exact_match, reciprocal_rank, rouge_l, EvalReport, Metric, QueryMetrics,
};
use permrank_core::ingest::{load_dataset, load_truth, synth_corpus, SynthTemplate, TruthRecord};
use permrank_core::permute::random_design;
use permrank_core::pipeline::{answer_with, pid_rerank, self_consistency, RankingRecord, RerankStrategy};
use permrank_core::{apply_permutation, seed, Ranking, RetrievalList};

use crate::backend::{self, Counting};
use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Method {
    Bayes,
    BayesPlus,
    Qg,
    Lingua,
    Listwise,
    SelfConsistency,
    Retriever,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum RandomMode {
    /// One shuffled ranking per query
    #[default]
    Single,
    /// `k` shuffled rankings per query, averaged by `eval`
    Average,
}

/// Run totals printed to stderr when a corpus command finishes.
#[derive(Debug, Default)]
struct Summary {
    queries: usize,
    failures: usize,
    calls: usize,
    residuals: Vec<f64>,
}

impl Summary {
    fn print(&self, cache: Option<&ScoreCache>) {
        let mut line = format!(
            "queries: {}, failures: {}, backend calls: {}",
            self.queries, self.failures, self.calls
        );
        if let Some(c) = cache {
            line.push_str(&format!(", cache hit rate: {:.3}", c.stats().hit_rate()));
        }
        if !self.residuals.is_empty() {
            let mean = self.residuals.iter().sum::<f64>() / self.residuals.len() as f64;
            line.push_str(&format!(", mean residual: {mean:.3e}"));
        }
        eprintln!("{line}");
    }

    fn exit_code(&self, keep_going: bool) -> u8 {
        u8::from(self.failures > 0 && !keep_going)
    }
}

/// What one query contributes to the output.
struct QueryOutput {
    records: Vec<RankingRecord>,
    residual: Option<f64>,
    calls: usize,
}

fn sub_seed(seed: u64, label: &str, query_id: &str) -> u64 {
    seed::derive_seed(seed, &format!("{label}:{query_id}"))
}

fn load_lists(path: &Path, summary: &mut Summary) -> Result<Vec<RetrievalList>> {
    let dataset = load_dataset(path, false)?;
    for e in &dataset.errors {
        log::error!("{}: {e}", path.display());
    }
    summary.failures += dataset.errors.len();
    summary.queries += dataset.errors.len();
    Ok(dataset.lists)
}

fn open_cache(cfg: &RunConfig) -> Result<Option<ScoreCache>> {
    cfg.cache
        .as_ref()
        .map(|p| ScoreCache::open(p).with_context(|| format!("opening cache {}", p.display())))
        .transpose()
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_jsonl<T: Serialize>(out: &mut dyn Write, item: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, item)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Runs `task` over `lists` on `jobs` threads and writes the records in input order.
fn run_corpus<F>(cfg: &RunConfig, lists: &[RetrievalList], summary: &mut Summary, task: F) -> Result<()>
where
    F: Fn(&RetrievalList) -> Result<QueryOutput> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build()?;
    let results: Vec<Result<QueryOutput>> = pool.install(|| lists.par_iter().map(&task).collect());
    let mut out = output(cfg.output.as_deref())?;
    for (list, result) in lists.iter().zip(results) {
        summary.queries += 1;
        match result {
            Ok(q) => {
                log::info!("query {}: {} backend calls", list.query.id, q.calls);
                summary.calls += q.calls;
                summary.residuals.extend(q.residual);
                for r in &q.records {
                    write_jsonl(&mut out, r)?;
                }
            }
            Err(e) => {
                log::error!("query {}: {e:#}", list.query.id);
                summary.failures += 1;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn rerank(cfg: &RunConfig, input: &Path, answer: bool) -> Result<u8> {
    let mut summary = Summary::default();
    let lists = load_lists(input, &mut summary)?;
    let backend = backend::build(cfg, &lists)?;
    let cache = open_cache(cfg)?;
    let strategy = RerankStrategy {
        design: cfg.design.context("no design selected")?,
        solver: cfg.solver.clone(),
        backend_opts: cfg.backend_opts.clone(),
        design_seed: 0,
    };
    run_corpus(cfg, &lists, &mut summary, |list| {
        let qid = &list.query.id;
        let counting = Counting::new(backend.as_ref());
        let strategy = strategy.reseeded(sub_seed(cfg.seed, "design", qid), sub_seed(cfg.seed, "solver", qid));
        let outcome = pid_rerank(&counting, list, &strategy, cache.as_ref())?;
        let mut record = RankingRecord::from_outcome(qid.clone(), &outcome);
        if answer {
            record.answer = Some(answer_with(&counting, list, &outcome.ranking)?);
        }
        Ok(QueryOutput {
            records: vec![record],
            residual: Some(outcome.model.residual_sse),
            calls: counting.calls(),
        })
    })?;
    summary.print(cache.as_ref());
    Ok(summary.exit_code(cfg.keep_going))
}

fn shuffled(list: &RetrievalList, k: usize, seed: u64) -> Result<Vec<Ranking>> {
    let design = random_design(list.len(), Some(k), seed)?;
    design
        .permutations
        .iter()
        .map(|p| {
            let ordered = apply_permutation(list, p)?;
            Ok(Ranking {
                passage_ids: ordered.iter().map(|p| p.id.clone()).collect(),
                utilities: None,
                provenance: "random".into(),
                degenerate: false,
            })
        })
        .collect()
}

pub fn baseline(cfg: &RunConfig, input: &Path, method: Method, k: usize, mode: RandomMode) -> Result<u8> {
    let mut summary = Summary::default();
    let lists = load_lists(input, &mut summary)?;
    let needs_backend = !matches!(method, Method::Retriever | Method::Random);
    let backend = if needs_backend { Some(backend::build(cfg, &lists)?) } else { None };
    let opts = &cfg.backend_opts;
    run_corpus(cfg, &lists, &mut summary, |list| {
        let qid = &list.query.id;
        let one = |r: &Ranking| vec![RankingRecord::from_ranking(qid.clone(), r)];
        let Some(backend) = backend.as_deref() else {
            let records = match method {
                Method::Retriever => one(&Ranking::retriever_order(list, "retriever")),
                _ => {
                    let k = if mode == RandomMode::Average { k } else { 1 };
                    shuffled(list, k, sub_seed(cfg.seed, "random", qid))?
                        .iter()
                        .map(|r| RankingRecord::from_ranking(qid.clone(), r))
                        .collect()
                }
            };
            return Ok(QueryOutput {
                records,
                residual: None,
                calls: 0,
            });
        };
        let counting = Counting::new(backend);
        let pointwise = |m: PointwiseMethod, prior: bool, name: &str| -> Result<Vec<RankingRecord>> {
            let scores = pointwise_scores(&counting, list, m, prior, opts)?;
            Ok(one(&rank_by_pointwise(&scores, list, name)?))
        };
        let records = match method {
            Method::Bayes => pointwise(PointwiseMethod::BayesSaliency, false, "bayes")?,
            Method::BayesPlus => pointwise(PointwiseMethod::BayesSaliency, true, "bayes_plus")?,
            Method::Qg => pointwise(PointwiseMethod::Qg, false, "qg")?,
            Method::Lingua => pointwise(PointwiseMethod::Lingua, false, "lingua")?,
            Method::Listwise => one(&bayes_saliency_listwise(&counting, list, opts)?),
            Method::SelfConsistency => {
                let vote = self_consistency(&counting, list, k, sub_seed(cfg.seed, "vote", qid), opts)?;
                let mut r = one(&Ranking::retriever_order(list, "self_consistency"));
                r[0].answer = Some(vote.answer);
                r
            }
            Method::Retriever | Method::Random => unreachable!("handled without a backend"),
        };
        Ok(QueryOutput {
            records,
            residual: None,
            calls: counting.calls(),
        })
    })?;
    summary.print(None);
    Ok(summary.exit_code(cfg.keep_going))
}

fn read_records(path: &Path) -> Result<Vec<RankingRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push(r);
    }
    Ok(out)
}

fn gold_ids(list: &RetrievalList, truth: Option<&BTreeMap<String, TruthRecord>>) -> Option<Vec<String>> {
    if let Some(ids) = &list.query.gold_passage_ids {
        return Some(ids.clone());
    }
    let best = *truth?.get(&list.query.id)?.argsort.first()?;
    list.at_rank(best).map(|p| vec![p.id.clone()])
}

pub fn eval(
    predictions: &Path,
    dataset: &Path,
    truth: Option<&Path>,
    metrics: &[Metric],
    out: Option<&Path>,
) -> Result<u8> {
    let records = read_records(predictions)?;
    let data = load_dataset(dataset, true)?;
    let truth = truth.map(load_truth).transpose()?;
    let lists: HashMap<&str, &RetrievalList> = data.lists.iter().map(|l| (l.query.id.as_str(), l)).collect();

    let mut grouped: Vec<(&str, Vec<&RankingRecord>)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut unknown = 0;
    for r in &records {
        if !lists.contains_key(r.query_id.as_str()) {
            unknown += 1;
            continue;
        }
        let slot = *index.entry(&r.query_id).or_insert_with(|| {
            grouped.push((&r.query_id, Vec::new()));
            grouped.len() - 1
        });
        grouped[slot].1.push(r);
    }
    if grouped.is_empty() {
        bail!("no query id of {} appears in {}", predictions.display(), dataset.display());
    }
    if unknown > 0 {
        log::warn!("{unknown} prediction(s) name queries missing from the dataset");
    }
    let missing = lists.len() - grouped.len();
    if missing > 0 {
        log::warn!("{missing} dataset queries have no prediction");
    }

    let mut per_query = Vec::with_capacity(grouped.len());
    for (qid, recs) in grouped {
        let list = lists[qid];
        let gold = gold_ids(list, truth.as_ref());
        let mut values = BTreeMap::new();
        for &m in metrics {
            let scores: Option<Vec<f64>> = recs
                .iter()
                .map(|r| match m {
                    Metric::Em => Some(100.0 * f64::from(exact_match(r.answer.as_deref()?, list.query.gold_answer.as_deref()?))),
                    Metric::RougeL => Some(rouge_l(r.answer.as_deref()?, list.query.gold_answer.as_deref()?)),
                    Metric::Mrr => Some(reciprocal_rank(&r.ranking(), gold.as_deref()?)),
                })
                .collect();
            if let Some(s) = scores {
                values.insert(m.name().to_string(), s.iter().sum::<f64>() / s.len() as f64);
            }
        }
        per_query.push(QueryMetrics {
            query_id: qid.to_string(),
            metrics: values,
        });
    }
    let report = EvalReport::from_per_query(per_query);
    for &m in metrics {
        if !report.counts.contains_key(m.name()) {
            bail!("metric {}: no query has the predictions and gold labels it needs", m.name());
        }
    }
    let mut w = output(out)?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    for (name, v) in &report.aggregate {
        eprintln!("{name}: {v:.4} over {} queries", report.counts[name]);
    }
    Ok(0)
}

pub fn bias_report(input: &Path, json: Option<&Path>, csv: Option<&Path>) -> Result<u8> {
    let records = read_records(input)?;
    let fitted: Vec<(&[f64], bool)> = records
        .iter()
        .filter_map(|r| r.bias.as_deref().map(|b| (b, r.degenerate)))
        .collect();
    if fitted.is_empty() {
        bail!("{} holds no fitted bias profiles; produce it with `permrank rerank`", input.display());
    }
    let report = bias_report_from_profiles(fitted).context("no non-degenerate fits found")?;
    let mut w = output(json)?;
    report.write_json(&mut w)?;
    w.write_all(b"\n")?;
    w.flush()?;
    if let Some(p) = csv {
        let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
        report.write_csv(&mut w)?;
        w.flush()?;
    }
    if let Some(rho) = report.position_correlation() {
        eprintln!(
            "{} queries ({} degenerate skipped), spearman(mean_a, position) = {rho:.3}",
            report.queries, report.excluded_degenerate
        );
    }
    Ok(0)
}

pub fn distill_build(cfg: &RunConfig, input: &Path, k: usize) -> Result<u8> {
    let mut load_summary = Summary::default();
    let lists = load_lists(input, &mut load_summary)?;
    let sink = cfg.output.as_deref().context("distill-build needs --out <PATH>")?;
    let backend = backend::build(cfg, &lists)?;
    let summary = build_distill_dataset(&lists, backend.as_ref(), k, cfg.seed, sink, &cfg.backend_opts, cfg.jobs)?;
    eprintln!(
        "{} new records ({} already present, {} failed), backend calls: {}",
        summary.written,
        summary.resumed,
        summary.failed,
        backend.calls()
    );
    let failed = summary.failed + load_summary.failures;
    Ok(u8::from(failed > 0 && !cfg.keep_going))
}

pub fn synth(queries: usize, passages: usize, seed: u64, retriever_noise: Option<f64>, out: &Path, truth_out: &Path) -> Result<u8> {
    let mut template = SynthTemplate::default();
    if let Some(n) = retriever_noise {
        template.retriever_noise = n;
    }
    synth_corpus(queries, passages, &template, seed, out, truth_out)?;
    eprintln!(
        "wrote {queries} queries x {passages} passages to {} (truth: {})",
        out.display(),
        truth_out.display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct CacheInfo<'a> {
    path: &'a Path,
    entries: usize,
    bytes: u64,
}

pub fn cache_stats(path: &Path) -> Result<u8> {
    let cache = ScoreCache::open(path).with_context(|| format!("opening cache {}", path.display()))?;
    let info = CacheInfo {
        path,
        entries: cache.len(),
        bytes: std::fs::metadata(path).map(|m| m.len()).unwrap_or(0),
    };
    println!("{}", serde_json::to_string(&info)?);
    Ok(0)
}

pub fn cache_clear(path: &Path) -> Result<u8> {
    let cache = ScoreCache::open(path).with_context(|| format!("opening cache {}", path.display()))?;
    let n = cache.len();
    cache.clear()?;
    eprintln!("cleared {n} entries from {}", path.display());
    Ok(0)
}
