//! Small dense least-squares solvers.

use nalgebra::{DMatrix, DVector};

const RANK_TOLERANCE: f64 = 1e-12;

/// Numerical rank of `a`, relative to its largest singular value.
pub fn rank(a: &DMatrix<f64>) -> usize {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > RANK_TOLERANCE * max).count()
}

/// Unconstrained `argmin ‖A x − b‖²`; `None` when `A` lacks full column rank.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if a.nrows() < a.ncols() || rank(a) < a.ncols() {
        return None;
    }
    let svd = a.clone().svd(true, true);
    let max = svd.singular_values.max();
    svd.solve(b, RANK_TOLERANCE * max).ok()
}

/// Non-negative least squares, `argmin ‖A x − b‖²` subject to `x ≥ 0`
/// (Lawson–Hanson active-set method).
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())) * b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE) * (a.nrows().max(n) as f64);
    let max_outer = 3 * n + 10;

    for _ in 0..max_outer {
        let gradient = a.transpose() * (b - a * &x);
        let candidate = (0..n)
            .filter(|&j| !passive[j])
            .max_by(|&i, &j| gradient[i].total_cmp(&gradient[j]));
        let Some(j) = candidate else { break };
        if gradient[j] <= tol {
            break;
        }
        passive[j] = true;

        loop {
            let cols: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let sub = a.select_columns(&cols);
            let z_sub = solve_min_norm(&sub, b);
            if cols.iter().zip(z_sub.iter()).all(|(_, &z)| z > 0.0) {
                for (&k, &z) in cols.iter().zip(z_sub.iter()) {
                    x[k] = z;
                }
                break;
            }
            // step back towards the feasible region
            let mut alpha = 1.0f64;
            for (&k, &z) in cols.iter().zip(z_sub.iter()) {
                if z <= 0.0 {
                    let denom = x[k] - z;
                    if denom > 0.0 {
                        alpha = alpha.min(x[k] / denom);
                    }
                }
            }
            for (&k, &z) in cols.iter().zip(z_sub.iter()) {
                x[k] += alpha * (z - x[k]);
                if x[k] <= 1e-15 * (1.0 + z.abs()) {
                    x[k] = 0.0;
                    passive[k] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    x
}

fn solve_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let max = svd.singular_values.max();
    svd.solve(b, RANK_TOLERANCE * max.max(f64::MIN_POSITIVE))
        .expect("both factors were requested")
}
