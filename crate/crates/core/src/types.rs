//! Shared domain types: queries, passages, retrieval lists, permutations and rankings.
//!
//! Passage positions inside a [`Permutation`] are 1-based and refer to
//! [`Passage::retriever_rank`], so `indices[j] == k` means "the passage the
//! retriever put at rank `k` sits at prompt position `j + 1`".

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_passage_ids: Option<Vec<String>>,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            gold_answer: None,
            gold_passage_ids: None,
        }
    }

    pub fn with_gold_answer(mut self, answer: impl Into<String>) -> Self {
        self.gold_answer = Some(answer.into());
        self
    }

    pub fn with_gold_passages<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.gold_passage_ids = Some(ids.into_iter().map(Into::into).collect());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
    pub retriever_rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retriever_score: Option<f64>,
}

impl Passage {
    pub fn new(id: impl Into<String>, text: impl Into<String>, retriever_rank: usize) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            retriever_rank,
            retriever_score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.retriever_score = Some(score);
        self
    }
}

/// A query together with its retriever-ordered passages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalList {
    pub query: Query,
    pub passages: Vec<Passage>,
}

/// One broken [`RetrievalList`] invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ListViolation {
    EmptyQueryId,
    EmptyQueryText,
    EmptyPassageId { position: usize },
    DuplicatePassageId(String),
    DuplicateRank(usize),
    RankGap(usize),
    RankOutOfRange { rank: usize, n: usize },
    OrderMismatch { position: usize, rank: usize },
}

impl fmt::Display for ListViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyQueryId => write!(f, "query id is empty"),
            Self::EmptyQueryText => write!(f, "query text is empty"),
            Self::EmptyPassageId { position } => {
                write!(f, "passage at position {position} has an empty id")
            }
            Self::DuplicatePassageId(id) => write!(f, "duplicate passage id `{id}`"),
            Self::DuplicateRank(rank) => write!(f, "duplicate retriever rank {rank}"),
            Self::RankGap(rank) => write!(f, "rank gap: missing rank {rank}"),
            Self::RankOutOfRange { rank, n } => {
                write!(f, "retriever rank {rank} outside 1..={n}")
            }
            Self::OrderMismatch { position, rank } => write!(
                f,
                "passage at position {position} has retriever rank {rank}"
            ),
        }
    }
}

/// Every violation found in a retrieval list, in discovery order.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid retrieval list: {}", join_violations(.0))]
pub struct ValidationReport(pub Vec<ListViolation>);

fn join_violations(v: &[ListViolation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PermutationError {
    #[error("permutation is empty")]
    Empty,
    #[error("permutation index {index} outside 1..={n}")]
    OutOfRange { index: usize, n: usize },
    #[error("permutation repeats index {0}")]
    Duplicate(usize),
    #[error("permutation has {len} entries but only {n} passages exist")]
    TooLong { len: usize, n: usize },
}

impl RetrievalList {
    pub fn new(query: Query, passages: Vec<Passage>) -> Self {
        Self { query, passages }
    }

    /// Number of passages `N`.
    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    /// Passage at 1-based retriever position `rank`.
    pub fn at_rank(&self, rank: usize) -> Option<&Passage> {
        rank.checked_sub(1).and_then(|i| self.passages.get(i))
    }

    pub fn ids(&self) -> Vec<String> {
        self.passages.iter().map(|p| p.id.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), ValidationReport> {
        validate_retrieval_list(self)
    }
}

/// Checks every [`RetrievalList`] invariant and reports all violations at once.
pub fn validate_retrieval_list(list: &RetrievalList) -> Result<(), ValidationReport> {
    let mut violations = Vec::new();
    if list.query.id.trim().is_empty() {
        violations.push(ListViolation::EmptyQueryId);
    }
    if list.query.text.trim().is_empty() {
        violations.push(ListViolation::EmptyQueryText);
    }

    let n = list.passages.len();
    let mut ids = HashSet::new();
    let mut ranks = vec![0usize; n + 1];
    for (pos, p) in list.passages.iter().enumerate() {
        if p.id.is_empty() {
            violations.push(ListViolation::EmptyPassageId { position: pos + 1 });
        } else if !ids.insert(p.id.as_str()) {
            violations.push(ListViolation::DuplicatePassageId(p.id.clone()));
        }
        if p.retriever_rank == 0 || p.retriever_rank > n {
            violations.push(ListViolation::RankOutOfRange {
                rank: p.retriever_rank,
                n,
            });
        } else {
            ranks[p.retriever_rank] += 1;
            if ranks[p.retriever_rank] == 2 {
                violations.push(ListViolation::DuplicateRank(p.retriever_rank));
            }
        }
    }
    for (rank, &count) in ranks.iter().enumerate().skip(1) {
        if count == 0 {
            violations.push(ListViolation::RankGap(rank));
        }
    }
    // order checks only make sense once the rank set itself is sound
    if violations.is_empty() {
        for (pos, p) in list.passages.iter().enumerate() {
            if p.retriever_rank != pos + 1 {
                violations.push(ListViolation::OrderMismatch {
                    position: pos + 1,
                    rank: p.retriever_rank,
                });
            }
        }
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(ValidationReport(violations))
    }
}

/// An ordered, duplicate-free selection of 1-based passage positions.
///
/// Shorter than `N` only for pruned permutations.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    /// Builds a permutation over `n` passages, rejecting out-of-range or repeated indices.
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self, PermutationError> {
        let perm = Self(indices);
        perm.check(n)?;
        Ok(perm)
    }

    pub fn identity(n: usize) -> Self {
        Self((1..=n).collect())
    }

    pub(crate) fn from_raw(indices: Vec<usize>) -> Self {
        Self(indices)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check(&self, n: usize) -> Result<(), PermutationError> {
        if self.0.is_empty() {
            return Err(PermutationError::Empty);
        }
        if self.0.len() > n {
            return Err(PermutationError::TooLong {
                len: self.0.len(),
                n,
            });
        }
        let mut seen = vec![false; n + 1];
        for &idx in &self.0 {
            if idx == 0 || idx > n {
                return Err(PermutationError::OutOfRange { index: idx, n });
            }
            if std::mem::replace(&mut seen[idx], true) {
                return Err(PermutationError::Duplicate(idx));
            }
        }
        Ok(())
    }

    /// Inverse of a full-length permutation: `inv[k - 1]` is the position holding rank `k`.
    pub fn inverse(&self) -> Option<Self> {
        let n = self.0.len();
        let mut inv = vec![0; n];
        for (pos, &idx) in self.0.iter().enumerate() {
            if idx == 0 || idx > n || inv[idx - 1] != 0 {
                return None;
            }
            inv[idx - 1] = pos + 1;
        }
        Some(Self(inv))
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, idx) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{idx}")?;
        }
        write!(f, "]")
    }
}

/// Passages in the order `perm` places them.
pub fn apply_permutation<'a>(
    list: &'a RetrievalList,
    perm: &Permutation,
) -> Result<Vec<&'a Passage>, PermutationError> {
    perm.check(list.len())?;
    Ok(perm.indices().iter().map(|&k| &list.passages[k - 1]).collect())
}

/// A full ordering of a retrieval list's passages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub passage_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utilities: Option<Vec<f64>>,
    pub provenance: String,
    #[serde(default)]
    pub degenerate: bool,
}

impl Ranking {
    /// The retriever's own order.
    pub fn retriever_order(list: &RetrievalList, provenance: impl Into<String>) -> Self {
        Self {
            passage_ids: list.ids(),
            utilities: None,
            provenance: provenance.into(),
            degenerate: false,
        }
    }

    /// Orders passages by descending utility; equal utilities keep retriever order.
    ///
    /// `utilities[k]` belongs to the passage at retriever rank `k + 1`.
    pub fn by_utility(
        list: &RetrievalList,
        utilities: &[f64],
        provenance: impl Into<String>,
    ) -> Self {
        assert_eq!(utilities.len(), list.len(), "one utility per passage");
        let order = argsort_desc(utilities);
        Self {
            passage_ids: order.iter().map(|&i| list.passages[i].id.clone()).collect(),
            utilities: Some(order.iter().map(|&i| utilities[i]).collect()),
            provenance: provenance.into(),
            degenerate: false,
        }
    }

    pub fn len(&self) -> usize {
        self.passage_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passage_ids.is_empty()
    }

    /// Passages of `list` in this ranking's order. `None` if an id is unknown.
    pub fn ordered_passages<'a>(&self, list: &'a RetrievalList) -> Option<Vec<&'a Passage>> {
        self.passage_ids
            .iter()
            .map(|id| list.passages.iter().find(|p| &p.id == id))
            .collect()
    }

    /// 1-based position of `id` in this ranking.
    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.passage_ids.iter().position(|p| p == id).map(|i| i + 1)
    }
}

/// Indices sorted by descending value, stable on ties.
pub fn argsort_desc(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn list_of(n: usize) -> RetrievalList {
        RetrievalList::new(
            Query::new("q1", "who wrote it?"),
            (1..=n)
                .map(|k| Passage::new(format!("p{k}"), format!("passage {k}"), k))
                .collect(),
        )
    }

    fn ids(ps: &[&Passage]) -> Vec<String> {
        ps.iter().map(|p| p.id.clone()).collect()
    }

    #[test]
    fn apply_identity_and_rotations() {
        let list = list_of(5);
        let id = Permutation::identity(5);
        assert_eq!(ids(&apply_permutation(&list, &id).unwrap()), list.ids());

        let rot = Permutation::new(vec![3, 4, 5, 1, 2], 5).unwrap();
        assert_eq!(
            ids(&apply_permutation(&list, &rot).unwrap()),
            ["p3", "p4", "p5", "p1", "p2"]
        );

        let pruned = Permutation::new(vec![4, 5, 1], 5).unwrap();
        assert_eq!(
            ids(&apply_permutation(&list, &pruned).unwrap()),
            ["p4", "p5", "p1"]
        );
    }

    #[test]
    fn malformed_permutations_are_rejected() {
        let list = list_of(3);
        let bad = Permutation::from_raw(vec![1, 4]);
        assert_eq!(
            apply_permutation(&list, &bad).unwrap_err(),
            PermutationError::OutOfRange { index: 4, n: 3 }
        );
        let dup = Permutation::from_raw(vec![2, 2]);
        assert_eq!(
            apply_permutation(&list, &dup).unwrap_err(),
            PermutationError::Duplicate(2)
        );
        assert!(Permutation::new(vec![0], 3).is_err());
        assert!(Permutation::new(vec![], 3).is_err());
    }

    #[test]
    fn inverse_restores_retriever_order() {
        let list = list_of(6);
        let perm = Permutation::new(vec![4, 1, 6, 2, 5, 3], 6).unwrap();
        let permuted: Vec<Passage> = apply_permutation(&list, &perm)
            .unwrap()
            .into_iter()
            .cloned()
            .collect();
        let relisted = RetrievalList::new(list.query.clone(), permuted);
        let inv = perm.inverse().unwrap();
        let restored = apply_permutation(&relisted, &inv).unwrap();
        assert_eq!(ids(&restored), list.ids());
        assert!(Permutation::from_raw(vec![4, 5, 1]).inverse().is_none());
    }

    #[test]
    fn validation_reports_each_violation() {
        assert!(list_of(3).validate().is_ok());

        let mut dup = list_of(3);
        dup.passages[2].retriever_rank = 2;
        let report = dup.validate().unwrap_err();
        assert!(report.0.contains(&ListViolation::DuplicateRank(2)));
        assert!(report.0.contains(&ListViolation::RankGap(3)));

        let mut gap = list_of(2);
        gap.passages[1].retriever_rank = 3;
        let report = gap.validate().unwrap_err();
        assert!(report.0.contains(&ListViolation::RankOutOfRange { rank: 3, n: 2 }));
        assert!(report.0.contains(&ListViolation::RankGap(2)));

        let mut swapped = list_of(3);
        swapped.passages.swap(0, 1);
        let report = swapped.validate().unwrap_err();
        assert_eq!(report.0.len(), 2);
        assert!(matches!(report.0[0], ListViolation::OrderMismatch { position: 1, rank: 2 }));

        let mut ids = list_of(2);
        ids.passages[1].id = "p1".into();
        assert_eq!(
            ids.validate().unwrap_err().0,
            vec![ListViolation::DuplicatePassageId("p1".into())]
        );
    }

    #[test]
    fn ranking_breaks_ties_by_retriever_rank() {
        let list = list_of(4);
        let r = Ranking::by_utility(&list, &[1.0, 2.0, 2.0, 0.5], "test");
        assert_eq!(r.passage_ids, ["p2", "p3", "p1", "p4"]);
        assert_eq!(r.position_of("p1"), Some(3));
    }
}
