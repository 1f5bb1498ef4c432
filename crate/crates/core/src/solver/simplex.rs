/// Euclidean projection of `v` onto the probability simplex `{x >= 0, sum x = 1}`.
///
/// Sort-based: find the largest `rho` with `sorted[rho] > (cumsum[rho] - 1) / (rho + 1)`
/// and shift everything by that threshold.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "cannot project an empty vector");
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        cumsum += x;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    // clean up rounding so the sum is 1 to machine precision
    let sum: f64 = out.iter().sum();
    if sum > 0.0 {
        out.iter_mut().for_each(|x| *x /= sum);
    } else {
        let n = out.len() as f64;
        out.iter_mut().for_each(|x| *x = 1.0 / n);
    }
    out
}
