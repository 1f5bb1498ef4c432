//! Separating positional bias from passage utility.
//!
//! Each scored permutation `pi_i` contributes one equation
//!
//! ```text
//! s_i ≈ sum_j a_j * u[pi_i[j]]
//! ```
//!
//! with `a` on the probability simplex. [`fit`] minimizes the squared error
//! by alternating two convex subproblems: a ridge-regularized linear least
//! squares solve for `u`, then projected gradient with backtracking for `a`.
//! Pruned permutations only sum over the positions they occupy, with `a`
//! renormalized over that prefix.

mod brute;
mod linalg;
mod simplex;

use std::io::Write;

use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::permute::PermutationDesign;
use crate::seed;

pub use brute::brute_force_fit;
pub use simplex::project_simplex;

/// Scores closer together than this carry no ordering signal.
pub const DEGENERATE_SPREAD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// `a_j ∝ N + 1 - j`.
    LinearDecay,
    Uniform,
    RandomSimplex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub restarts: usize,
    pub max_iterations: usize,
    /// Stop once an iteration lowers the loss by less than this fraction of it.
    pub tolerance: f64,
    pub ridge: f64,
    pub seed: u64,
    pub init: InitStrategy,
    /// Record `(iteration, loss, a)` for every iteration of the winning restart.
    pub trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iterations: 500,
            tolerance: 1e-10,
            ridge: 1e-8,
            seed: 0,
            init: InitStrategy::LinearDecay,
            trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.restarts == 0 {
            return Err(SolverError::Config("restarts must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(SolverError::Config("tolerance must be positive".into()));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(SolverError::Config("ridge must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("no passages to fit")]
    NoPassages,
    #[error("design has no permutations")]
    EmptyDesign,
    #[error("{scores} scores for {equations} permutations")]
    LengthMismatch { scores: usize, equations: usize },
    #[error("score {index} is not finite")]
    NonFinite { index: usize },
    #[error("malformed design: {0}")]
    Design(String),
    #[error("model has {model} passages, design has {design}")]
    DimensionMismatch { model: usize, design: usize },
    #[error("grid search supports at most 5 passages, got {0}")]
    GridTooLarge(usize),
    #[error("grid step {0} must divide 1")]
    GridStep(f64),
    #[error("invalid solver config: {0}")]
    Config(String),
}

/// Per-position weights on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BiasProfile(pub Vec<f64>);

/// Debiased utility per passage, indexed by retriever rank - 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UtilityVector(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub loss: f64,
    pub a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentangledModel {
    pub bias: BiasProfile,
    pub utility: UtilityVector,
    pub residual_sse: f64,
    pub iterations: usize,
    pub restarts_used: usize,
    pub converged: bool,
    pub underdetermined: bool,
    /// Scores had no spread; `bias` is the initial profile and `utility` constant.
    pub degenerate: bool,
    /// Regularized loss after each iteration of the winning restart (index 0 is the start).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_history: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceEntry>,
}

impl DisentangledModel {
    pub fn n(&self) -> usize {
        self.bias.0.len()
    }
}

/// Writes the fit trace as JSONL, one `{iteration, loss, a}` object per line.
pub fn write_trace_jsonl<W: Write>(model: &DisentangledModel, mut out: W) -> std::io::Result<()> {
    for entry in &model.trace {
        serde_json::to_writer(&mut out, entry)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// The equations of one fit, with permutations 0-based.
struct Problem {
    n: usize,
    perms: Vec<Vec<usize>>,
    scores: Vec<f64>,
    full: bool,
}

impl Problem {
    fn new(design: &PermutationDesign, scores: Vec<f64>) -> Self {
        Self {
            n: design.n_passages,
            perms: design
                .permutations
                .iter()
                .map(|p| p.indices().iter().map(|k| k - 1).collect())
                .collect(),
            scores,
            full: design.is_full(),
        }
    }

    fn prefix_mass(&self, a: &[f64], len: usize) -> f64 {
        if len == self.n {
            1.0
        } else {
            a[..len].iter().sum()
        }
    }

    /// Position `j` of an equation of length `len` carries weight `a[j] * f + g`.
    fn weight_coeffs(&self, a: &[f64], len: usize) -> (f64, f64) {
        let mass = self.prefix_mass(a, len);
        if mass > 1e-15 {
            (1.0 / mass, 0.0)
        } else {
            (0.0, 1.0 / len as f64)
        }
    }

    fn predict_one(&self, perm: &[usize], a: &[f64], u: &[f64]) -> f64 {
        let (f, g) = self.weight_coeffs(a, perm.len());
        perm.iter().zip(a).map(|(&p, aj)| (aj * f + g) * u[p]).sum()
    }

    fn predict(&self, a: &[f64], u: &[f64]) -> Vec<f64> {
        self.perms.iter().map(|perm| self.predict_one(perm, a, u)).collect()
    }

    fn sse(&self, a: &[f64], u: &[f64]) -> f64 {
        self.perms
            .iter()
            .zip(&self.scores)
            .map(|(perm, s)| (self.predict_one(perm, a, u) - s).powi(2))
            .sum()
    }

    /// Ridge least squares for `u` with `a` fixed.
    fn solve_utility(&self, a: &[f64], ridge: f64) -> Vec<f64> {
        let n = self.n;
        let mut gram = vec![0.0; n * n];
        let mut rhs = vec![0.0; n];
        for (perm, &s) in self.perms.iter().zip(&self.scores) {
            let (f, g) = self.weight_coeffs(a, perm.len());
            for (x, &p) in perm.iter().enumerate() {
                let wx = a[x] * f + g;
                rhs[p] += wx * s;
                let row = &mut gram[p * n..(p + 1) * n];
                for (y, &q) in perm.iter().enumerate() {
                    row[q] += wx * (a[y] * f + g);
                }
            }
        }
        let mut jitter = ridge;
        loop {
            let mut g = gram.clone();
            for i in 0..n {
                g[i * n + i] += jitter;
            }
            if let Some(u) = linalg::cholesky_solve(&g, &rhs, n) {
                return u;
            }
            jitter = if jitter == 0.0 { 1e-14 } else { jitter * 10.0 };
        }
    }

    /// Gradient of the squared error with respect to `a`, plus the error itself.
    fn bias_gradient(&self, a: &[f64], u: &[f64]) -> (Vec<f64>, f64) {
        let mut grad = vec![0.0; self.n];
        let mut sse = 0.0;
        for (perm, &s) in self.perms.iter().zip(&self.scores) {
            let len = perm.len();
            let pred = self.predict_one(perm, a, u);
            let r = pred - s;
            sse += r * r;
            if len == self.n {
                for (j, &p) in perm.iter().enumerate() {
                    grad[j] += 2.0 * r * u[p];
                }
            } else {
                let mass = self.prefix_mass(a, len);
                if mass > 1e-15 {
                    for (j, &p) in perm.iter().enumerate() {
                        grad[j] += 2.0 * r * (u[p] - pred) / mass;
                    }
                }
            }
        }
        (grad, sse)
    }

    /// Projected gradient on the simplex with `u` fixed. Never increases the error.
    fn improve_bias(&self, a: &mut Vec<f64>, u: &[f64], step: &mut f64, inner: usize) {
        for _ in 0..inner {
            let (grad, f) = self.bias_gradient(a, u);
            let mut t = (*step * 2.0).min(1e12);
            let accepted = loop {
                let cand: Vec<f64> =
                    project_simplex(&a.iter().zip(&grad).map(|(x, g)| x - t * g).collect::<Vec<_>>());
                let d: Vec<f64> = cand.iter().zip(a.iter()).map(|(c, x)| c - x).collect();
                let d2: f64 = d.iter().map(|x| x * x).sum();
                if d2 == 0.0 {
                    break None;
                }
                let lin: f64 = d.iter().zip(&grad).map(|(x, g)| x * g).sum();
                let f_new = self.sse(&cand, u);
                if f_new <= f + lin + d2 / (2.0 * t) && f_new <= f {
                    break Some((cand, f_new, d2));
                }
                t *= 0.5;
                if t < 1e-30 {
                    break None;
                }
            };
            let Some((cand, f_new, d2)) = accepted else {
                return;
            };
            *step = t;
            *a = cand;
            if d2 < 1e-30 || f - f_new <= 1e-14 * f {
                return;
            }
        }
    }
}

fn init_profile(n: usize, init: InitStrategy, seed: u64) -> Vec<f64> {
    match init {
        InitStrategy::LinearDecay => {
            let total = (n * (n + 1) / 2) as f64;
            (0..n).map(|j| (n - j) as f64 / total).collect()
        }
        InitStrategy::Uniform => vec![1.0 / n as f64; n],
        InitStrategy::RandomSimplex => {
            let mut rng = seed::rng(seed);
            let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            draws.iter().map(|x| x / total).collect()
        }
    }
}

struct RestartResult {
    a: Vec<f64>,
    u: Vec<f64>,
    sse: f64,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
    trace: Vec<TraceEntry>,
}

const INNER_BIAS_STEPS: usize = 25;
const MAX_REACH: f64 = 1e4;

/// Squared error (in scaled units) below which the data count as reproduced.
///
/// The ridge keeps the optimum a hair away from zero error, roughly `ridge²` per
/// equation.
fn exact_fit_floor(problem: &Problem, ridge: f64) -> f64 {
    let ridge_floor = (1e-24 + 100.0 * ridge * ridge) * problem.scores.len() as f64;
    ridge_floor.max(1e-20 * score_energy(problem))
}

/// Squared error below which a restart has found the global basin, so further
/// restarts cannot improve on it.
fn restart_stop_level(problem: &Problem, ridge: f64) -> f64 {
    exact_fit_floor(problem, ridge).max(1e-12 * score_energy(problem))
}

fn score_energy(problem: &Problem) -> f64 {
    problem.scores.iter().map(|s| s * s).sum()
}

/// Picks the primacy-leaning member of the family of equivalent full-design solutions.
///
/// With `a = 1/N + d` and `u = c + v` (`v` centred), every full-length
/// prediction equals `c + Σ_j d_j v[π[j]]`, so `(d, v)` and `(-t d, -v / t)`
/// fit identically for any `t > 0` keeping `a` feasible. The mirrored member
/// reverses the utility order, so the orientation whose bias profile leans
/// toward early positions is kept.
fn orient_primacy(a: &mut [f64], u: &mut [f64]) {
    let n = a.len();
    let uniform = 1.0 / n as f64;
    let dev: Vec<f64> = a.iter().map(|x| x - uniform).collect();
    let lean: f64 = dev
        .iter()
        .enumerate()
        .map(|(j, d)| d * (n as f64 + 1.0 - 2.0 * (j + 1) as f64))
        .sum();
    if lean >= 0.0 {
        return;
    }
    let t = dev
        .iter()
        .filter(|d| **d > 0.0)
        .map(|d| uniform / d)
        .fold(1.0, f64::min);
    let centre = u.iter().sum::<f64>() / n as f64;
    for (aj, d) in a.iter_mut().zip(&dev) {
        *aj = (uniform - t * d).max(0.0);
    }
    let total: f64 = a.iter().sum();
    a.iter_mut().for_each(|x| *x /= total);
    for uj in u.iter_mut() {
        *uj = centre - (*uj - centre) / t;
    }
}

/// Moves a full-design solution to the sharpest equivalent bias profile.
///
/// `(1/N + t d, c + v / t)` fits identically for every feasible `t > 0`; the
/// largest `t` puts `a` on the simplex boundary and gives the smallest `|u|`,
/// which is the member the ridge term prefers.
fn contract_to_boundary(a: &mut [f64], u: &mut [f64]) {
    let n = a.len();
    let uniform = 1.0 / n as f64;
    let dev: Vec<f64> = a.iter().map(|x| x - uniform).collect();
    let t = dev
        .iter()
        .filter(|d| **d < 0.0)
        .map(|d| uniform / -d)
        .fold(f64::INFINITY, f64::min);
    if !t.is_finite() || t <= 1.0 {
        return;
    }
    let centre = u.iter().sum::<f64>() / n as f64;
    for (aj, d) in a.iter_mut().zip(&dev) {
        *aj = (uniform + t * d).max(0.0);
    }
    let total: f64 = a.iter().sum();
    a.iter_mut().for_each(|x| *x /= total);
    for uj in u.iter_mut() {
        *uj = centre + (*uj - centre) / t;
    }
}

fn run_restart(problem: &Problem, mut a: Vec<f64>, config: &SolverConfig) -> RestartResult {
    let ridge = config.ridge;
    let objective = |a: &[f64], u: &[f64]| problem.sse(a, u) + ridge * u.iter().map(|x| x * x).sum::<f64>();
    let floor = exact_fit_floor(problem, config.ridge);

    let mut u = problem.solve_utility(&a, ridge);
    let mut loss = objective(&a, &u);
    let mut history = vec![loss];
    let mut trace = Vec::new();
    if config.trace {
        trace.push(TraceEntry { iteration: 0, loss, a: a.clone() });
    }
    let mut step = 1.0 / (2.0 * problem.perms.len() as f64 * u.iter().map(|x| x * x).sum::<f64>().max(1e-12));
    let mut converged = problem.sse(&a, &u) <= floor;
    let mut iterations = 0;
    let mut reach = 2.0;

    while !converged && iterations < config.max_iterations {
        iterations += 1;
        let mut a_next = a.clone();
        problem.improve_bias(&mut a_next, &u, &mut step, INNER_BIAS_STEPS);
        let mut u_next = problem.solve_utility(&a_next, ridge);
        let mut next = objective(&a_next, &u_next);
        // extrapolate along the last bias move; kept only if it beats the plain step
        if next <= loss {
            let a_ext = project_simplex(
                &a.iter()
                    .zip(&a_next)
                    .map(|(old, new)| old + reach * (new - old))
                    .collect::<Vec<_>>(),
            );
            let u_ext = problem.solve_utility(&a_ext, ridge);
            let ext = objective(&a_ext, &u_ext);
            if ext < next {
                a_next = a_ext;
                u_next = u_ext;
                next = ext;
                reach = (reach * 1.5).min(MAX_REACH);
            } else {
                reach = (reach * 0.5).max(2.0);
            }
        }
        if problem.full {
            contract_to_boundary(&mut a_next, &mut u_next);
            next = objective(&a_next, &u_next);
        }
        if !(next <= loss) {
            // rounding noise at the bottom of the basin
            converged = true;
            break;
        }
        let decrease = loss - next;
        a = a_next;
        u = u_next;
        loss = next;
        history.push(loss);
        if config.trace {
            trace.push(TraceEntry { iteration: iterations, loss, a: a.clone() });
        }
        if decrease <= config.tolerance * loss || problem.sse(&a, &u) <= floor {
            converged = true;
        }
    }

    RestartResult {
        sse: problem.sse(&a, &u),
        a,
        u,
        iterations,
        converged,
        history,
        trace,
    }
}

fn check_inputs(design: &PermutationDesign, scores: &[f64]) -> Result<(), SolverError> {
    if design.n_passages == 0 {
        return Err(SolverError::NoPassages);
    }
    if design.is_empty() {
        return Err(SolverError::EmptyDesign);
    }
    if scores.len() != design.len() {
        return Err(SolverError::LengthMismatch {
            scores: scores.len(),
            equations: design.len(),
        });
    }
    for p in &design.permutations {
        p.check(design.n_passages)
            .map_err(|e| SolverError::Design(e.to_string()))?;
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(SolverError::NonFinite { index });
    }
    Ok(())
}

/// Fits bias and utilities to observed permutation scores.
///
/// Restart 0 starts from `config.init`; later restarts start from random
/// simplex points derived from `(config.seed, restart index)`. The restart
/// with the lowest residual wins, earlier restarts winning ties.
pub fn fit(design: &PermutationDesign, scores: &[f64], config: &SolverConfig) -> Result<DisentangledModel, SolverError> {
    check_inputs(design, scores)?;
    config.validate()?;
    let n = design.n_passages;
    let underdetermined = design.distinct_count() < 2 * n - 1;
    let first_init = init_profile(n, config.init, seed::derive_indexed(config.seed, 0));

    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= DEGENERATE_SPREAD {
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let u = vec![mean; n];
        let residual_sse = scores.iter().map(|s| (s - mean).powi(2)).sum();
        return Ok(DisentangledModel {
            bias: BiasProfile(first_init),
            utility: UtilityVector(u),
            residual_sse,
            iterations: 0,
            restarts_used: 0,
            converged: true,
            underdetermined,
            degenerate: true,
            loss_history: Vec::new(),
            trace: Vec::new(),
        });
    }

    // centre and scale so the ridge and tolerances are unit-free
    let centre = scores.iter().sum::<f64>() / scores.len() as f64;
    let spread = scores.iter().map(|s| (s - centre).abs()).fold(0.0, f64::max);
    let scaled: Vec<f64> = scores.iter().map(|s| (s - centre) / spread).collect();
    let problem = Problem::new(design, scaled);

    let mut best: Option<RestartResult> = None;
    let mut restarts_used = 0;
    for r in 0..config.restarts {
        let init = if r == 0 {
            first_init.clone()
        } else {
            init_profile(n, InitStrategy::RandomSimplex, seed::derive_indexed(config.seed, r as u64))
        };
        let result = run_restart(&problem, init, config);
        restarts_used += 1;
        if best.as_ref().is_none_or(|b| result.sse < b.sse) {
            best = Some(result);
        }
        // nothing left to improve on
        if best.as_ref().is_some_and(|b| b.sse <= restart_stop_level(&problem, config.ridge)) {
            break;
        }
    }
    let mut best = best.expect("at least one restart");
    if design.is_full() {
        orient_primacy(&mut best.a, &mut best.u);
        contract_to_boundary(&mut best.a, &mut best.u);
    }

    let utility: Vec<f64> = best.u.iter().map(|x| x * spread + centre).collect();
    let mut model = DisentangledModel {
        bias: BiasProfile(best.a),
        utility: UtilityVector(utility),
        residual_sse: 0.0,
        iterations: best.iterations,
        restarts_used,
        converged: best.converged,
        underdetermined,
        degenerate: false,
        loss_history: best.history,
        trace: best.trace,
    };
    model.residual_sse = predict(&model, design)?
        .iter()
        .zip(scores)
        .map(|(p, s)| (p - s).powi(2))
        .sum();
    Ok(model)
}

/// Scores the model assigns to each permutation of `design`.
pub fn predict(model: &DisentangledModel, design: &PermutationDesign) -> Result<Vec<f64>, SolverError> {
    if model.n() != design.n_passages || model.utility.0.len() != design.n_passages {
        return Err(SolverError::DimensionMismatch {
            model: model.n(),
            design: design.n_passages,
        });
    }
    for p in &design.permutations {
        p.check(design.n_passages)
            .map_err(|e| SolverError::Design(e.to_string()))?;
    }
    let problem = Problem::new(design, vec![0.0; design.len()]);
    Ok(problem.predict(&model.bias.0, &model.utility.0))
}
