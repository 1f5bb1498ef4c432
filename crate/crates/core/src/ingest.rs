//! Dataset JSONL loading and synthetic corpus generation.
//!
//! One record per line:
//!
//! ```json
//! {"query_id": "q1", "query": "who ...?", "answer": "...",
//!  "passages": [{"id": "d1", "text": "...", "rank": 1, "score": 12.5}],
//!  "gold_ids": ["d1"]}
//! ```
//!
//! `answer`, `score` and `gold_ids` are optional. Synthetic corpora come with a
//! sidecar of ground truth, one `{query_id, a_star, u_star, argsort}` per line,
//! where `u_star[k]` belongs to the passage at retriever rank `k + 1` and
//! `argsort` lists retriever ranks by descending `u_star`.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::SimOracleConfig;
use crate::seed;
use crate::types::{argsort_desc, Passage, Query, RetrievalList};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub id: String,
    pub text: String,
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub query_id: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub passages: Vec<PassageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_ids: Option<Vec<String>>,
}

impl DatasetRecord {
    pub fn into_list(self) -> RetrievalList {
        let query = Query {
            id: self.query_id,
            text: self.query,
            gold_answer: self.answer,
            gold_passage_ids: self.gold_ids,
        };
        let passages = self
            .passages
            .into_iter()
            .map(|p| Passage {
                id: p.id,
                text: p.text,
                retriever_rank: p.rank,
                retriever_score: p.score,
            })
            .collect();
        RetrievalList::new(query, passages)
    }
}

impl From<&RetrievalList> for DatasetRecord {
    fn from(list: &RetrievalList) -> Self {
        Self {
            query_id: list.query.id.clone(),
            query: list.query.text.clone(),
            answer: list.query.gold_answer.clone(),
            passages: list
                .passages
                .iter()
                .map(|p| PassageRecord {
                    id: p.id.clone(),
                    text: p.text.clone(),
                    rank: p.retriever_rank,
                    score: p.retriever_score,
                })
                .collect(),
            gold_ids: list.query.gold_passage_ids.clone(),
        }
    }
}

/// A rejected line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for RecordError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {error}")]
    Invalid { path: PathBuf, error: RecordError },
    #[error("n_queries and n_passages must be at least 1")]
    EmptyCorpus,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Valid records in file order plus a report of the rejected ones.
#[derive(Debug, Default)]
pub struct Dataset {
    pub lists: Vec<RetrievalList>,
    pub errors: Vec<RecordError>,
}

/// Loads a dataset file. With `strict`, the first bad line is an error;
/// otherwise bad lines are collected in [`Dataset::errors`].
pub fn load_dataset(path: impl AsRef<Path>, strict: bool) -> Result<Dataset, IngestError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Dataset::default();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<DatasetRecord>(&line)
            .map_err(|e| format!("malformed record: {e}"))
            .and_then(|r| {
                let list = r.into_list();
                list.validate().map_err(|e| e.to_string())?;
                if !seen.insert(list.query.id.clone()) {
                    return Err(format!("duplicate query id {:?}", list.query.id));
                }
                Ok(list)
            });
        match parsed {
            Ok(list) => out.lists.push(list),
            Err(message) => {
                let error = RecordError { line: i + 1, message };
                if strict {
                    return Err(IngestError::Invalid {
                        path: path.to_path_buf(),
                        error,
                    });
                }
                log::warn!("{}: {error}", path.display());
                out.errors.push(error);
            }
        }
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), IngestError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| io_err(path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_dataset(path: impl AsRef<Path>, lists: &[RetrievalList]) -> Result<(), IngestError> {
    write_jsonl(path.as_ref(), lists.iter().map(DatasetRecord::from))
}

/// Ground truth for one synthetic query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub query_id: String,
    pub a_star: Vec<f64>,
    pub u_star: Vec<f64>,
    /// 1-based retriever ranks ordered by descending `u_star`.
    pub argsort: Vec<usize>,
}

impl TruthRecord {
    pub fn new(query_id: impl Into<String>, a_star: Vec<f64>, u_star: Vec<f64>) -> Self {
        let argsort = argsort_desc(&u_star).into_iter().map(|i| i + 1).collect();
        Self {
            query_id: query_id.into(),
            a_star,
            u_star,
            argsort,
        }
    }

    /// Oracle for this query, answering with the `answer:` tokens of `list`.
    pub fn oracle(&self, list: &RetrievalList) -> Result<SimOracleConfig, crate::backend::BackendError> {
        Ok(SimOracleConfig::new(self.a_star.clone(), self.u_star.clone())?
            .with_vocab(SimOracleConfig::vocab_from_passages(list)))
    }
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<BTreeMap<String, TruthRecord>, IngestError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TruthRecord = serde_json::from_str(&line).map_err(|e| IngestError::Invalid {
            path: path.to_path_buf(),
            error: RecordError {
                line: i + 1,
                message: e.to_string(),
            },
        })?;
        out.insert(t.query_id.clone(), t);
    }
    Ok(out)
}

pub fn write_truth(path: impl AsRef<Path>, truth: &[TruthRecord]) -> Result<(), IngestError> {
    write_jsonl(path.as_ref(), truth)
}

/// Shape of the per-query ground truth drawn by [`synth_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTemplate {
    /// Draw `a*` strictly decreasing; otherwise uniform on the simplex.
    pub decreasing_bias: bool,
    /// Minimum gap between consecutive `a*` entries (shrunk when `N` is too large for it).
    pub bias_gap: f64,
    /// Minimum gap between any two utilities (shrunk likewise).
    pub utility_gap: f64,
    pub utility_range: (f64, f64),
    /// Std of the Gaussian noise separating retriever scores from utilities.
    pub retriever_noise: f64,
}

impl Default for SynthTemplate {
    fn default() -> Self {
        Self {
            decreasing_bias: true,
            bias_gap: 0.05,
            utility_gap: 0.5,
            utility_range: (0.5, 5.0),
            retriever_noise: 1.0,
        }
    }
}

/// A strictly decreasing point of the simplex whose consecutive entries differ by at least `gap`.
pub fn sample_decreasing_bias<R: Rng + ?Sized>(n: usize, gap: f64, rng: &mut R) -> Vec<f64> {
    let pairs = (n * n.saturating_sub(1) / 2) as f64;
    let gap = if pairs > 0.0 { gap.min(0.5 / pairs) } else { 0.0 };
    let rest = 1.0 - gap * pairs;
    let mut e: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = e.iter().sum();
    e.iter_mut().for_each(|x| *x *= rest / total);
    e.sort_by(|a, b| b.total_cmp(a));
    e.iter().enumerate().map(|(j, x)| x + gap * (n - 1 - j) as f64).collect()
}

/// A uniform point of the simplex.
pub fn sample_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// `n` values in `[lo, hi]` pairwise at least `gap` apart, in random order.
pub fn sample_separated<R: Rng + ?Sized>(n: usize, gap: f64, (lo, hi): (f64, f64), rng: &mut R) -> Vec<f64> {
    let gap = if n > 1 { gap.min((hi - lo) / (n - 1) as f64) } else { 0.0 };
    let slack = (hi - lo) - gap * n.saturating_sub(1) as f64;
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * slack).collect();
    v.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = v.iter().enumerate().map(|(i, x)| lo + x + gap * i as f64).collect();
    out.shuffle(rng);
    out
}

/// Generates a synthetic corpus in memory. Deterministic in `seed`.
pub fn synth_lists(
    n_queries: usize,
    n_passages: usize,
    template: &SynthTemplate,
    seed: u64,
) -> Result<(Vec<RetrievalList>, Vec<TruthRecord>), IngestError> {
    if n_queries == 0 || n_passages == 0 {
        return Err(IngestError::EmptyCorpus);
    }
    let base = seed::derive_seed(seed, "synth");
    let noise = Normal::new(0.0, template.retriever_noise.max(0.0)).expect("finite std");
    let mut lists = Vec::with_capacity(n_queries);
    let mut truth = Vec::with_capacity(n_queries);
    for q in 0..n_queries {
        let mut rng = seed::rng(seed::derive_indexed(base, q as u64));
        let a_star = if template.decreasing_bias {
            sample_decreasing_bias(n_passages, template.bias_gap, &mut rng)
        } else {
            sample_simplex(n_passages, &mut rng)
        };
        let utility = sample_separated(n_passages, template.utility_gap, template.utility_range, &mut rng);
        let scores: Vec<f64> = utility.iter().map(|u| (u + noise.sample(&mut rng)).max(0.01)).collect();
        let order = argsort_desc(&scores);
        let qid = format!("q{q}");
        let passages: Vec<Passage> = order
            .iter()
            .enumerate()
            .map(|(rank, &k)| {
                Passage::new(
                    format!("q{q}d{k}"),
                    format!("Synthetic passage {k} for query {q}. answer: ans{q}x{k}"),
                    rank + 1,
                )
                .with_score((scores[k] * 1e6).round() / 1e6)
            })
            .collect();
        let u_star: Vec<f64> = order.iter().map(|&k| utility[k]).collect();
        let best = argsort_desc(&u_star)[0];
        let gold = &passages[best];
        let query = Query::new(qid.clone(), format!("What is the answer to synthetic question {q}?"))
            .with_gold_answer(format!("ans{q}x{}", order[best]))
            .with_gold_passages([gold.id.clone()]);
        lists.push(RetrievalList::new(query, passages));
        truth.push(TruthRecord::new(qid, a_star, u_star));
    }
    Ok((lists, truth))
}

/// Writes a synthetic dataset and its ground-truth sidecar.
pub fn synth_corpus(
    n_queries: usize,
    n_passages: usize,
    template: &SynthTemplate,
    seed: u64,
    dataset_path: impl AsRef<Path>,
    truth_path: impl AsRef<Path>,
) -> Result<(Vec<RetrievalList>, Vec<TruthRecord>), IngestError> {
    let (lists, truth) = synth_lists(n_queries, n_passages, template, seed)?;
    write_dataset(dataset_path, &lists)?;
    write_truth(truth_path, &truth)?;
    Ok((lists, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    const GOOD: &str = r#"{"query_id":"a","query":"q a","passages":[{"id":"x","text":"t","rank":1}]}"#;

    #[test]
    fn loads_well_formed_file() {
        let dir = tempfile::tempdir().unwrap();
        let body = [GOOD, &GOOD.replace("\"a\"", "\"b\""), &GOOD.replace("\"a\"", "\"c\"")].join("\n");
        let d = load_dataset(write(dir.path(), "d.jsonl", &body), true).unwrap();
        assert_eq!(d.lists.len(), 3);
        assert!(d.errors.is_empty());
        assert_eq!(d.lists[2].query.id, "c");
    }

    #[test]
    fn bad_lines_are_reported_with_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let dup = r#"{"query_id":"b","query":"q","passages":[{"id":"x","text":"t","rank":1},{"id":"x","text":"u","rank":2}]}"#;
        let body = format!("{GOOD}\n{dup}\nnot json\n");
        let p = write(dir.path(), "d.jsonl", &body);
        let d = load_dataset(&p, false).unwrap();
        assert_eq!(d.lists.len(), 1);
        assert_eq!(d.errors.iter().map(|e| e.line).collect::<Vec<_>>(), vec![2, 3]);
        assert!(d.errors[0].message.contains("duplicate"), "{}", d.errors[0].message);
        match load_dataset(&p, true) {
            Err(IngestError::Invalid { error, .. }) => assert_eq!(error.line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_file_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let d = load_dataset(write(dir.path(), "e.jsonl", ""), true).unwrap();
        assert!(d.lists.is_empty());
        assert!(matches!(load_dataset(dir.path().join("nope"), false), Err(IngestError::Io { .. })));
    }

    #[test]
    fn synth_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let run = |tag: &str| {
            let d = dir.path().join(format!("{tag}.jsonl"));
            let t = dir.path().join(format!("{tag}.truth.jsonl"));
            synth_corpus(10, 5, &SynthTemplate::default(), 1, &d, &t).unwrap();
            (std::fs::read(d).unwrap(), std::fs::read(t).unwrap())
        };
        let (d1, t1) = run("a");
        let (d2, t2) = run("b");
        assert_eq!(d1, d2);
        assert_eq!(t1, t2);
        let loaded = load_dataset(dir.path().join("a.jsonl"), true).unwrap();
        assert_eq!(loaded.lists.len(), 10);
        let truth = load_truth(dir.path().join("a.truth.jsonl")).unwrap();
        assert_eq!(truth.len(), 10);
        for t in truth.values() {
            assert!(t.a_star.windows(2).all(|w| w[0] > w[1]));
        }
        assert!(matches!(synth_lists(0, 3, &SynthTemplate::default(), 0), Err(IngestError::EmptyCorpus)));
    }

    #[test]
    fn gold_passage_has_top_utility_and_answer() {
        let (lists, truth) = synth_lists(5, 6, &SynthTemplate::default(), 3).unwrap();
        for (l, t) in lists.iter().zip(&truth) {
            let gold = &l.query.gold_passage_ids.as_ref().unwrap()[0];
            let best = l.at_rank(t.argsort[0]).unwrap();
            assert_eq!(&best.id, gold);
            let oracle = t.oracle(l).unwrap();
            assert_eq!(Some(&oracle.answer_vocab[gold]), l.query.gold_answer.as_ref());
        }
    }

    proptest! {
        #[test]
        fn synth_truth_is_consistent(seed in any::<u64>(), n in 1usize..12) {
            let (lists, truth) = synth_lists(3, n, &SynthTemplate::default(), seed).unwrap();
            for (l, t) in lists.iter().zip(&truth) {
                prop_assert!(l.validate().is_ok());
                let expect: Vec<usize> = argsort_desc(&t.u_star).into_iter().map(|i| i + 1).collect();
                prop_assert_eq!(&t.argsort, &expect);
                prop_assert!((t.a_star.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(t.a_star.windows(2).all(|w| w[0] > w[1]));
                let mut u = t.u_star.clone();
                u.sort_by(f64::total_cmp);
                prop_assert!(u.windows(2).all(|w| w[1] - w[0] >= (0.5f64).min(4.5 / (n.max(2) - 1) as f64) - 1e-12));
                prop_assert!(u.iter().all(|x| (0.5..=5.0).contains(x)));
            }
        }

        #[test]
        fn dataset_round_trips(seed in any::<u64>(), n in 1usize..6) {
            let (lists, _) = synth_lists(4, n, &SynthTemplate::default(), seed).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("d.jsonl");
            write_dataset(&p, &lists).unwrap();
            let back = load_dataset(&p, true).unwrap();
            prop_assert_eq!(back.lists, lists);
        }
    }
}
