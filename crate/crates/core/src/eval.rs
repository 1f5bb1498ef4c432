//! Answer metrics, ranking metrics and the positional-bias report.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::solver::DisentangledModel;
use crate::types::Ranking;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("rankings do not contain the same passage ids")]
    IdMismatch,
    #[error("need at least 2 items, got {0}")]
    TooShort(usize),
    #[error("{0} rankings but {1} gold sets")]
    LengthMismatch(usize, usize),
    #[error("no non-degenerate models to report on")]
    NoModels,
    #[error("models disagree on passage count: {0} vs {1}")]
    MixedN(usize, usize),
}

fn strip_punctuation(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .to_lowercase()
}

/// Lowercases, drops punctuation and English articles, collapses whitespace.
pub fn normalize_answer(s: &str) -> String {
    strip_punctuation(s)
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 if the normalized strings match, else 0.
pub fn exact_match(pred: &str, gold: &str) -> u8 {
    u8::from(normalize_answer(pred) == normalize_answer(gold))
}

/// Lowercases, drops punctuation, collapses whitespace. Keeps articles.
pub fn normalize_text(s: &str) -> String {
    strip_punctuation(s).split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Tokens for ROUGE-L: lowercase, punctuation removed, split on whitespace.
/// Articles are kept; they are legitimate LCS material.
fn rouge_tokens(s: &str) -> Vec<String> {
    strip_punctuation(s).split_whitespace().map(str::to_string).collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 over whitespace tokens, scaled to [0, 100].
pub fn rouge_l(pred: &str, gold: &str) -> f64 {
    let p = rouge_tokens(pred);
    let g = rouge_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 100.0 } else { 0.0 };
    }
    let lcs = lcs_len(&p, &g) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / p.len() as f64;
    let recall = lcs / g.len() as f64;
    100.0 * 2.0 * precision * recall / (precision + recall)
}

/// 1 / (position of the first gold passage), or 0 when none is ranked.
pub fn reciprocal_rank(ranking: &Ranking, gold: &[String]) -> f64 {
    ranking
        .passage_ids
        .iter()
        .position(|id| gold.contains(id))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// Mean reciprocal rank over queries; `gold[i]` belongs to `rankings[i]`.
pub fn mrr(rankings: &[Ranking], gold: &[Vec<String>]) -> Result<f64, EvalError> {
    if rankings.len() != gold.len() {
        return Err(EvalError::LengthMismatch(rankings.len(), gold.len()));
    }
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = rankings.iter().zip(gold).map(|(r, g)| reciprocal_rank(r, g)).sum();
    Ok(total / rankings.len() as f64)
}

/// Kendall tau-a between two orderings of the same passage ids.
pub fn kendall_tau(r1: &Ranking, r2: &Ranking) -> Result<f64, EvalError> {
    let n = r1.len();
    if n != r2.len() {
        return Err(EvalError::IdMismatch);
    }
    let ids: HashSet<&String> = r1.passage_ids.iter().collect();
    if ids.len() != n || r2.passage_ids.iter().any(|id| !ids.contains(id)) {
        return Err(EvalError::IdMismatch);
    }
    if n < 2 {
        return Err(EvalError::TooShort(n));
    }
    let pos2: BTreeMap<&String, usize> = r2.passage_ids.iter().enumerate().map(|(i, id)| (id, i)).collect();
    let second: Vec<usize> = r1.passage_ids.iter().map(|id| pos2[id]).collect();
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            score += if second[i] < second[j] { 1 } else { -1 };
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(score as f64 / pairs)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation. `None` when either side is constant or lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub mean_a: Vec<f64>,
    /// Population standard deviation per position.
    pub std_a: Vec<f64>,
    pub queries: usize,
    pub excluded_degenerate: usize,
}

impl BiasReport {
    /// Spearman correlation of `mean_a` with position index.
    pub fn position_correlation(&self) -> Option<f64> {
        let pos: Vec<f64> = (1..=self.mean_a.len()).map(|j| j as f64).collect();
        spearman(&self.mean_a, &pos)
    }

    pub fn write_json<W: Write>(&self, out: W) -> std::io::Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    /// `position,mean,std` rows with 1-based positions.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "position,mean,std")?;
        for (j, (m, s)) in self.mean_a.iter().zip(&self.std_a).enumerate() {
            writeln!(out, "{},{m},{s}", j + 1)?;
        }
        Ok(())
    }
}

/// Per-position mean and spread of fitted bias profiles; degenerate fits are skipped.
pub fn bias_report<'a>(models: impl IntoIterator<Item = &'a DisentangledModel>) -> Result<BiasReport, EvalError> {
    bias_report_from_profiles(models.into_iter().map(|m| (m.bias.0.as_slice(), m.degenerate)))
}

/// [`bias_report`] over bare `(profile, degenerate)` pairs.
pub fn bias_report_from_profiles<'a>(
    profiles: impl IntoIterator<Item = (&'a [f64], bool)>,
) -> Result<BiasReport, EvalError> {
    let mut kept: Vec<&[f64]> = Vec::new();
    let mut excluded = 0;
    for (a, degenerate) in profiles {
        if degenerate {
            excluded += 1;
            continue;
        }
        if let Some(first) = kept.first() {
            if first.len() != a.len() {
                return Err(EvalError::MixedN(first.len(), a.len()));
            }
        }
        kept.push(a);
    }
    let Some(first) = kept.first() else {
        return Err(EvalError::NoModels);
    };
    let n = first.len();
    let count = kept.len() as f64;
    let mean_a: Vec<f64> = (0..n).map(|j| kept.iter().map(|a| a[j]).sum::<f64>() / count).collect();
    let std_a = (0..n)
        .map(|j| (kept.iter().map(|a| (a[j] - mean_a[j]).powi(2)).sum::<f64>() / count).sqrt())
        .collect();
    Ok(BiasReport {
        mean_a,
        std_a,
        queries: kept.len(),
        excluded_degenerate: excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Em,
    RougeL,
    Mrr,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Em => "em",
            Metric::RougeL => "rouge_l",
            Metric::Mrr => "mrr",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "em" | "exact_match" => Ok(Metric::Em),
            "rouge_l" | "rougel" | "rouge" => Ok(Metric::RougeL),
            "mrr" => Ok(Metric::Mrr),
            other => Err(format!("unknown metric {other:?} (expected em, rouge_l or mrr)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_query: Vec<QueryMetrics>,
    /// Mean of each metric over the queries that report it.
    pub aggregate: BTreeMap<String, f64>,
    /// Number of queries contributing to each metric.
    pub counts: BTreeMap<String, usize>,
}

impl EvalReport {
    pub fn from_per_query(per_query: Vec<QueryMetrics>) -> Self {
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for q in &per_query {
            for (k, v) in &q.metrics {
                *sums.entry(k.clone()).or_default() += v;
                *counts.entry(k.clone()).or_default() += 1;
            }
        }
        let aggregate = sums.into_iter().map(|(k, s)| (k.clone(), s / counts[&k] as f64)).collect();
        Self {
            per_query,
            aggregate,
            counts,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{BiasProfile, UtilityVector};
    use proptest::prelude::*;

    fn ranking(ids: &[&str]) -> Ranking {
        Ranking {
            passage_ids: ids.iter().map(|s| s.to_string()).collect(),
            utilities: None,
            provenance: "test".into(),
            degenerate: false,
        }
    }

    fn model(a: &[f64], degenerate: bool) -> DisentangledModel {
        DisentangledModel {
            bias: BiasProfile(a.to_vec()),
            utility: UtilityVector(vec![0.0; a.len()]),
            residual_sse: 0.0,
            iterations: 0,
            restarts_used: 0,
            converged: true,
            underdetermined: false,
            degenerate,
            loss_history: vec![],
            trace: vec![],
        }
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("Paris", "paris."), 1);
        assert_eq!(exact_match("the Eiffel Tower", "Eiffel Tower"), 1);
        assert_eq!(exact_match("Paris", "London"), 0);
        assert_eq!(normalize_answer("  An  apple, the pie! "), "apple pie");
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("the cat sat", "the cat sat"), 100.0);
        assert_eq!(rouge_l("dog", "cat"), 0.0);
        assert!((rouge_l("a c", "a b c") - 80.0).abs() < 1e-9);
        assert_eq!(rouge_l("", "x"), 0.0);
    }

    #[test]
    fn mrr_examples() {
        let r = ranking(&["p1", "p2", "p3"]);
        let at = |k: usize| vec![format!("p{k}")];
        assert_eq!(mrr(&vec![r.clone(); 4], &vec![at(2); 4]).unwrap(), 0.5);
        assert_eq!(mrr(&vec![r.clone(); 4], &vec![at(1); 4]).unwrap(), 1.0);
        assert!((mrr(&vec![r.clone(); 4], &vec![at(3); 4]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mrr(std::slice::from_ref(&r), &[vec!["zz".into()]]).unwrap(), 0.0);
        assert!(mrr(&[r], &[]).is_err());
    }

    #[test]
    fn kendall_examples() {
        let a = ranking(&["p1", "p2", "p3"]);
        assert_eq!(kendall_tau(&a, &a).unwrap(), 1.0);
        assert_eq!(kendall_tau(&a, &ranking(&["p3", "p2", "p1"])).unwrap(), -1.0);
        assert!((kendall_tau(&a, &ranking(&["p1", "p3", "p2"])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(kendall_tau(&a, &ranking(&["p1", "p2", "p4"])), Err(EvalError::IdMismatch));
        assert_eq!(kendall_tau(&ranking(&["p1"]), &ranking(&["p1"])), Err(EvalError::TooShort(1)));
    }

    #[test]
    fn bias_report_examples() {
        let one = bias_report([&model(&[0.6, 0.3, 0.1], false)]).unwrap();
        assert_eq!(one.mean_a, vec![0.6, 0.3, 0.1]);
        assert_eq!(one.std_a, vec![0.0; 3]);

        let two = bias_report([&model(&[1.0, 0.0], false), &model(&[0.0, 1.0], false)]).unwrap();
        assert_eq!(two.mean_a, vec![0.5, 0.5]);
        assert_eq!(two.std_a, vec![0.5, 0.5]);

        let skipped = bias_report([&model(&[0.5, 0.5], true), &model(&[0.7, 0.3], false)]).unwrap();
        assert_eq!(skipped.queries, 1);
        assert_eq!(skipped.excluded_degenerate, 1);

        assert_eq!(bias_report([&model(&[0.5, 0.5], true)]), Err(EvalError::NoModels));
        assert_eq!(
            bias_report([&model(&[0.5, 0.5], false), &model(&[1.0, 0.0, 0.0], false)]),
            Err(EvalError::MixedN(2, 3))
        );
    }

    #[test]
    fn bias_report_csv() {
        let r = bias_report([&model(&[0.75, 0.25], false)]).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "position,mean,std\n1,0.75,0\n2,0.25,0\n");
        assert_eq!(r.position_correlation(), Some(-1.0));
    }

    #[test]
    fn spearman_handles_ties_and_constants() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(r > 0.9 && r < 1.0);
    }

    #[test]
    fn report_aggregates_are_means() {
        let q = |id: &str, em: f64| QueryMetrics {
            query_id: id.into(),
            metrics: [("em".to_string(), em)].into(),
        };
        let r = EvalReport::from_per_query(vec![q("a", 100.0), q("b", 0.0), q("c", 50.0)]);
        assert_eq!(r.aggregate["em"], 50.0);
        assert_eq!(r.counts["em"], 3);
    }

    fn arb_text() -> impl Strategy<Value = String> {
        proptest::collection::vec(prop_oneof!["a", "the", "cat", "Dog", "x,", "an", "sat."], 0..6)
            .prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn exact_match_is_symmetric_and_idempotent(a in arb_text(), b in arb_text()) {
            prop_assert_eq!(exact_match(&a, &b), exact_match(&b, &a));
            prop_assert_eq!(exact_match(&normalize_answer(&a), &a), 1);
            prop_assert_eq!(normalize_answer(&normalize_answer(&a)), normalize_answer(&a));
        }

        #[test]
        fn rouge_is_bounded(a in arb_text(), b in arb_text()) {
            let r = rouge_l(&a, &b);
            prop_assert!((0.0..=100.0).contains(&r));
            if !rouge_tokens(&a).is_empty() {
                prop_assert!((rouge_l(&a, &a) - 100.0).abs() < 1e-9);
            }
        }

        #[test]
        fn mrr_is_one_over_k(k in 1usize..10, queries in 1usize..20) {
            let r = ranking(&(1..=10).map(|i| format!("p{i}")).collect::<Vec<_>>().iter().map(String::as_str).collect::<Vec<_>>());
            let v = mrr(&vec![r; queries], &vec![vec![format!("p{k}")]; queries]).unwrap();
            prop_assert!((v - 1.0 / k as f64).abs() < 1e-12);
        }

        #[test]
        fn kendall_reverse_is_minus_one(ids in proptest::collection::hash_set("[a-z]{1,4}", 2..10)) {
            let ids: Vec<String> = ids.into_iter().collect();
            let fwd = Ranking { passage_ids: ids.clone(), utilities: None, provenance: "t".into(), degenerate: false };
            let mut back = fwd.clone();
            back.passage_ids.reverse();
            prop_assert_eq!(kendall_tau(&fwd, &back).unwrap(), -1.0);
        }

        #[test]
        fn bias_mean_stays_on_simplex(raw in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 4), 1..20)) {
            let models: Vec<DisentangledModel> = raw.iter().map(|v| {
                let s: f64 = v.iter().sum::<f64>() + 1e-9;
                model(&v.iter().map(|x| (x + 1e-9 / 4.0) / s).collect::<Vec<_>>(), false)
            }).collect();
            let r = bias_report(&models).unwrap();
            prop_assert!((r.mean_a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(r.mean_a.iter().all(|&m| (0.0..=1.0).contains(&m)));
        }
    }
}
