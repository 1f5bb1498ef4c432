//! Passage reranking for retrieval-augmented generation that separates a
//! passage's utility from the generator's position bias.
//!
//! The pipeline scores several orderings of the retrieved passages through a
//! generator [`backend`], fits the linear model `s_i ≈ Σ_j a_j · u[π_i[j]]`
//! with the position weights `a` on the probability simplex ([`solver`]), and
//! reorders the passages by the fitted utilities `u` ([`pipeline`]).
//!
//! ```
//! use permrank_core::permute::cyclic_design;
//! use permrank_core::solver::{fit, SolverConfig};
//!
//! let design = cyclic_design(3).unwrap();
//! let model = fit(&design, &[2.2, 1.9, 2.3], &SolverConfig::default()).unwrap();
//! assert!((model.bias.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod baselines;
pub mod distill;
pub mod eval;
pub mod ingest;
pub mod permute;
pub mod pipeline;
pub mod seed;
pub mod solver;
pub mod types;

pub use types::{apply_permutation, validate_retrieval_list, Passage, Permutation, Query, Ranking, RetrievalList};
