//! Grid-search reference fit, independent of the alternating solver.
//!
//! Walks every point of the simplex grid with the given step and solves the
//! utility subproblem as a minimum-norm least-squares problem through an SVD.

use nalgebra::{DMatrix, DVector};

use super::{BiasProfile, DisentangledModel, SolverError, UtilityVector};
use crate::permute::PermutationDesign;

const MAX_GRID_PASSAGES: usize = 5;

pub fn brute_force_fit(design: &PermutationDesign, scores: &[f64], grid_step: f64) -> Result<DisentangledModel, SolverError> {
    super::check_inputs(design, scores)?;
    let n = design.n_passages;
    if n > MAX_GRID_PASSAGES {
        return Err(SolverError::GridTooLarge(n));
    }
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(SolverError::GridStep(grid_step));
    }
    let ticks = (1.0 / grid_step).round();
    if (ticks * grid_step - 1.0).abs() > 1e-9 {
        return Err(SolverError::GridStep(grid_step));
    }
    let ticks = ticks as usize;
    let target = DVector::from_column_slice(scores);

    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut visited = 0;
    let mut counts = vec![0usize; n];
    for_each_composition(ticks, &mut counts, 0, &mut |c| {
        visited += 1;
        let a: Vec<f64> = c.iter().map(|&k| k as f64 / ticks as f64).collect();
        let design_matrix = equation_matrix(design, &a);
        let svd = design_matrix.clone().svd(true, true);
        let u = svd
            .solve(&target, 1e-12)
            .expect("svd computed with both factors");
        let residual = (&design_matrix * &u - &target).norm_squared();
        let better = best.as_ref().is_none_or(|(r, _, _)| residual < *r - 1e-15 * (1.0 + r));
        if better {
            best = Some((residual, a, u.iter().copied().collect()));
        }
    });

    let (residual, a, u) = best.expect("grid has at least one point");
    Ok(DisentangledModel {
        bias: BiasProfile(a),
        utility: UtilityVector(u),
        residual_sse: residual,
        iterations: visited,
        restarts_used: 0,
        converged: true,
        underdetermined: design.distinct_count() < 2 * n - 1,
        degenerate: false,
        loss_history: Vec::new(),
        trace: Vec::new(),
    })
}

/// Row `i` holds the weight each passage receives in equation `i`.
fn equation_matrix(design: &PermutationDesign, a: &[f64]) -> DMatrix<f64> {
    let n = design.n_passages;
    let mut m = DMatrix::zeros(design.len(), n);
    for (i, perm) in design.permutations.iter().enumerate() {
        let idx = perm.indices();
        let occupied: f64 = a[..idx.len()].iter().sum();
        for (j, &p) in idx.iter().enumerate() {
            let w = if idx.len() == n {
                a[j]
            } else if occupied > 1e-15 {
                a[j] / occupied
            } else {
                1.0 / idx.len() as f64
            };
            m[(i, p - 1)] += w;
        }
    }
    m
}

/// Visits every way of splitting `remaining` ticks over `slots[pos..]`,
/// first slot taking the most ticks first.
fn for_each_composition(remaining: usize, slots: &mut [usize], pos: usize, visit: &mut dyn FnMut(&[usize])) {
    if pos == slots.len() - 1 {
        slots[pos] = remaining;
        visit(slots);
        return;
    }
    for k in (0..=remaining).rev() {
        slots[pos] = k;
        for_each_composition(remaining - k, slots, pos + 1, visit);
    }
}
