//! Permutation designs: which orderings of the passages get scored.
//!
//! * [`random_design`] samples distinct full permutations (3N by default).
//! * [`cyclic_design`] uses the N rotations of retriever order, so every
//!   passage visits every position exactly once.
//! * [`pruned_cyclic_design`] keeps only the first `L` entries of each rotation.
//! * [`variable_pruned_design`] picks a per-rotation prefix length from the
//!   retriever-score mass it covers.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::types::{Permutation, RetrievalList};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignStrategy {
    Random,
    Cyclic,
    PrunedCyclic,
    VariablePruned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationDesign {
    pub permutations: Vec<Permutation>,
    pub strategy: DesignStrategy,
    pub n_passages: usize,
    pub seed: Option<u64>,
}

impl PermutationDesign {
    pub fn len(&self) -> usize {
        self.permutations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutations.is_empty()
    }

    /// True when every permutation covers all `n_passages` positions.
    pub fn is_full(&self) -> bool {
        self.permutations.iter().all(|p| p.len() == self.n_passages)
    }

    pub fn distinct_count(&self) -> usize {
        self.permutations.iter().collect::<HashSet<_>>().len()
    }

    /// Checks every permutation against `n_passages` and for pairwise distinctness.
    pub fn validate(&self) -> Result<(), PermuteError> {
        for p in &self.permutations {
            p.check(self.n_passages)
                .map_err(|e| PermuteError::Malformed(e.to_string()))?;
        }
        if self.distinct_count() != self.permutations.len() {
            return Err(PermuteError::Malformed("duplicate permutations".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PermuteError {
    #[error("a design needs at least one passage")]
    NoPassages,
    #[error("permutation count must be at least 1")]
    ZeroCount,
    #[error("L out of range: {l} not in 1..={n}")]
    PruneLength { l: usize, n: usize },
    #[error("tau must lie in (0, 1], got {0}")]
    Tau(f64),
    #[error("passage `{0}` has no retriever score")]
    MissingScore(String),
    #[error("retriever scores must be finite, nonnegative and not all zero")]
    InvalidScores,
    #[error("could not draw {wanted} distinct permutations (got {got})")]
    Exhausted { wanted: usize, got: usize },
    #[error("malformed design: {0}")]
    Malformed(String),
}

/// `n!`, or `None` when it does not fit in a `usize`.
pub fn factorial(n: usize) -> Option<usize> {
    (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k))
}

// enumerating all of U is cheaper than rejection sampling once the request
// covers most of it
const ENUMERATE_LIMIT: usize = 40_320;

/// Samples `m` (default `3n`, capped at `n!`) distinct full permutations.
pub fn random_design(n: usize, m: Option<usize>, seed: u64) -> Result<PermutationDesign, PermuteError> {
    if n == 0 {
        return Err(PermuteError::NoPassages);
    }
    let wanted = m.unwrap_or(3 * n);
    if wanted == 0 {
        return Err(PermuteError::ZeroCount);
    }
    let universe = factorial(n);
    let m = universe.map_or(wanted, |u| wanted.min(u));
    let mut rng = seed::rng(seed);

    let permutations = match universe {
        Some(u) if u <= ENUMERATE_LIMIT && 2 * m > u => {
            let mut all = all_permutations(n);
            all.shuffle(&mut rng);
            all.truncate(m);
            all
        }
        _ => {
            let mut seen = HashSet::with_capacity(m);
            let mut out = Vec::with_capacity(m);
            let mut base: Vec<usize> = (1..=n).collect();
            let mut attempts = 0;
            while out.len() < m && attempts < 100 * m {
                attempts += 1;
                base.shuffle(&mut rng);
                if seen.insert(base.clone()) {
                    out.push(Permutation::from_raw(base.clone()));
                }
            }
            if out.len() < m {
                return Err(PermuteError::Exhausted {
                    wanted: m,
                    got: out.len(),
                });
            }
            out
        }
    };

    Ok(PermutationDesign {
        permutations,
        strategy: DesignStrategy::Random,
        n_passages: n,
        seed: Some(seed),
    })
}

/// All `n!` permutations in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Permutation> {
    let mut cur: Vec<usize> = (1..=n).collect();
    let mut out = vec![Permutation::from_raw(cur.clone())];
    while next_lexicographic(&mut cur) {
        out.push(Permutation::from_raw(cur.clone()));
    }
    out
}

fn next_lexicographic(v: &mut [usize]) -> bool {
    let Some(i) = v.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = v.iter().rposition(|&x| x > v[i]).expect("pivot has a successor");
    v.swap(i, j);
    v[i + 1..].reverse();
    true
}

/// The `k`-th rotation of retriever order (1-based): `[k, k+1, .., n, 1, .., k-1]`.
pub fn rotation(n: usize, k: usize) -> Permutation {
    rotation_prefix(n, k, n)
}

/// First `len` entries of [`rotation`]`(n, k)`.
fn rotation_prefix(n: usize, k: usize, len: usize) -> Permutation {
    Permutation::from_raw((0..len).map(|j| (k - 1 + j) % n + 1).collect())
}

pub fn cyclic_design(n: usize) -> Result<PermutationDesign, PermuteError> {
    if n == 0 {
        return Err(PermuteError::NoPassages);
    }
    Ok(PermutationDesign {
        permutations: (1..=n).map(|k| rotation(n, k)).collect(),
        strategy: DesignStrategy::Cyclic,
        n_passages: n,
        seed: None,
    })
}

/// Rotations pruned to their first `l` passages.
///
/// For `k <= n - l` the prefix is the contiguous run `[k, .., k+l-1]`;
/// otherwise it wraps: `[k, .., n, 1, .., k+l-n-1]`.
pub fn pruned_cyclic_design(n: usize, l: usize) -> Result<PermutationDesign, PermuteError> {
    if n == 0 {
        return Err(PermuteError::NoPassages);
    }
    if l == 0 || l > n {
        return Err(PermuteError::PruneLength { l, n });
    }
    let permutations = (1..=n)
        .map(|k| {
            let indices = if k + l <= n + 1 {
                (k..k + l).collect()
            } else {
                (k..=n).chain(1..=k + l - n - 1).collect()
            };
            Permutation::from_raw(indices)
        })
        .collect();
    Ok(PermutationDesign {
        permutations,
        strategy: DesignStrategy::PrunedCyclic,
        n_passages: n,
        seed: None,
    })
}

/// Per-rotation prefix lengths chosen by retriever-score mass.
///
/// For rotation `k`, `L_k` is the shortest prefix whose summed retriever
/// scores reach `tau` times the total, clamped to `[2, n]` (`[1, 1]` when
/// `n == 1`).
pub fn variable_pruned_design(list: &RetrievalList, tau: f64) -> Result<PermutationDesign, PermuteError> {
    let n = list.len();
    if n == 0 {
        return Err(PermuteError::NoPassages);
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(PermuteError::Tau(tau));
    }
    let scores = list
        .passages
        .iter()
        .map(|p| p.retriever_score.ok_or_else(|| PermuteError::MissingScore(p.id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(PermuteError::InvalidScores);
    }
    let total: f64 = scores.iter().sum();
    if total <= 0.0 {
        return Err(PermuteError::InvalidScores);
    }
    let target = tau * total - 1e-12 * total;
    let floor = n.min(2);

    let permutations = (1..=n)
        .map(|k| {
            let mut mass = 0.0;
            let mut len = n;
            for j in 0..n {
                mass += scores[(k - 1 + j) % n];
                if mass >= target {
                    len = j + 1;
                    break;
                }
            }
            rotation_prefix(n, k, len.clamp(floor, n))
        })
        .collect();
    Ok(PermutationDesign {
        permutations,
        strategy: DesignStrategy::VariablePruned,
        n_passages: n,
        seed: None,
    })
}

/// `counts[p - 1][j]` is how often passage `p` sits at position `j + 1`.
pub fn coverage_matrix(design: &PermutationDesign) -> Vec<Vec<u32>> {
    let n = design.n_passages;
    let mut counts = vec![vec![0u32; n]; n];
    for perm in &design.permutations {
        for (pos, &p) in perm.indices().iter().enumerate() {
            counts[p - 1][pos] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Passage, Query};

    fn idx(p: &Permutation) -> Vec<usize> {
        p.indices().to_vec()
    }

    fn scored_list(scores: &[f64]) -> RetrievalList {
        RetrievalList::new(
            Query::new("q", "text"),
            scores
                .iter()
                .enumerate()
                .map(|(i, &s)| Passage::new(format!("p{}", i + 1), "t", i + 1).with_score(s))
                .collect(),
        )
    }

    #[test]
    fn random_design_counts() {
        let d = random_design(4, None, 7).unwrap();
        assert_eq!(d.len(), 12);
        assert!(d.permutations.iter().all(|p| p.len() == 4));
        d.validate().unwrap();

        let d = random_design(3, None, 1).unwrap();
        assert_eq!(d.len(), 6);
        assert_eq!(d.distinct_count(), 6);

        let d = random_design(1, None, 1).unwrap();
        assert_eq!(d.permutations, vec![Permutation::identity(1)]);

        assert_eq!(random_design(5, Some(7), 3).unwrap().len(), 7);
        assert_eq!(random_design(0, None, 3), Err(PermuteError::NoPassages));
        assert_eq!(random_design(3, Some(0), 3), Err(PermuteError::ZeroCount));
    }

    #[test]
    fn random_design_is_seeded() {
        assert_eq!(random_design(6, None, 11).unwrap(), random_design(6, None, 11).unwrap());
        assert_ne!(random_design(6, None, 11).unwrap(), random_design(6, None, 12).unwrap());
    }

    #[test]
    fn all_permutations_enumerates_universe() {
        let all = all_permutations(4);
        assert_eq!(all.len(), 24);
        assert_eq!(all.iter().collect::<HashSet<_>>().len(), 24);
        assert_eq!(idx(&all[0]), [1, 2, 3, 4]);
        assert_eq!(idx(&all[23]), [4, 3, 2, 1]);
    }

    #[test]
    fn cyclic_examples() {
        let d = cyclic_design(5).unwrap();
        assert_eq!(idx(&d.permutations[2]), [3, 4, 5, 1, 2]);
        assert_eq!(cyclic_design(1).unwrap().permutations, vec![Permutation::identity(1)]);
        let d3: Vec<_> = cyclic_design(3).unwrap().permutations.iter().map(idx).collect();
        assert_eq!(d3, vec![vec![1, 2, 3], vec![2, 3, 1], vec![3, 1, 2]]);
    }

    #[test]
    fn pruned_examples() {
        let d = pruned_cyclic_design(5, 3).unwrap();
        assert_eq!(idx(&d.permutations[0]), [1, 2, 3]);
        assert_eq!(idx(&d.permutations[3]), [4, 5, 1]);
        assert_eq!(
            pruned_cyclic_design(6, 6).unwrap().permutations,
            cyclic_design(6).unwrap().permutations
        );
        assert_eq!(
            pruned_cyclic_design(2, 3),
            Err(PermuteError::PruneLength { l: 3, n: 2 })
        );
        assert!(pruned_cyclic_design(4, 0).is_err());
    }

    #[test]
    fn coverage_examples() {
        let c = coverage_matrix(&cyclic_design(4).unwrap());
        assert!(c.iter().flatten().all(|&x| x == 1));

        let single = PermutationDesign {
            permutations: vec![Permutation::identity(3)],
            strategy: DesignStrategy::Random,
            n_passages: 3,
            seed: None,
        };
        assert_eq!(coverage_matrix(&single), vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);

        // [1,2] [2,3] [3,1]: each passage appears twice in total
        let c = coverage_matrix(&pruned_cyclic_design(3, 2).unwrap());
        assert!(c.iter().all(|row| row.iter().sum::<u32>() == 2));
        assert_eq!(c, vec![vec![1, 1, 0], vec![1, 1, 0], vec![1, 1, 0]]);
    }

    #[test]
    fn variable_pruning_examples() {
        let list = scored_list(&[0.9, 0.5, 0.3, 0.2, 0.1]);
        let d = variable_pruned_design(&list, 1.0).unwrap();
        assert_eq!(d.permutations, cyclic_design(5).unwrap().permutations);

        let d = variable_pruned_design(&scored_list(&[1.0; 5]), 0.6).unwrap();
        assert!(d.permutations.iter().all(|p| p.len() == 3));
        let d = variable_pruned_design(&scored_list(&[0.2; 5]), 0.6).unwrap();
        assert!(d.permutations.iter().all(|p| p.len() == 3));

        // 10/14 already clears 0.7, so the clamp lifts L_1 from 1 to 2
        let d = variable_pruned_design(&scored_list(&[10.0, 1.0, 1.0, 1.0, 1.0]), 0.7).unwrap();
        assert_eq!(idx(&d.permutations[0]), [1, 2]);
        // starting at p2 needs 1+1+1+1+10 = 14 >= 9.8, i.e. the full rotation
        assert_eq!(d.permutations[1].len(), 5);

        let single = variable_pruned_design(&scored_list(&[0.4]), 0.5).unwrap();
        assert_eq!(single.permutations, vec![Permutation::identity(1)]);
    }

    #[test]
    fn variable_pruning_errors() {
        let mut list = scored_list(&[1.0, 2.0]);
        list.passages[1].retriever_score = None;
        assert_eq!(
            variable_pruned_design(&list, 0.5),
            Err(PermuteError::MissingScore("p2".into()))
        );
        assert!(matches!(
            variable_pruned_design(&scored_list(&[1.0]), 0.0),
            Err(PermuteError::Tau(_))
        ));
        assert_eq!(
            variable_pruned_design(&scored_list(&[0.0, 0.0]), 0.5),
            Err(PermuteError::InvalidScores)
        );
        assert_eq!(
            variable_pruned_design(&scored_list(&[-1.0, 2.0]), 0.5),
            Err(PermuteError::InvalidScores)
        );
    }
}
