//! Trapezoidal quadrature on uniform grids.

/// `∫ f` over a uniform grid with spacing `step`.
pub fn trapezoid(values: &[f64], step: f64) -> f64 {
    match values {
        [] | [_] => 0.0,
        [first, inner @ .., last] => step * (0.5 * (first + last) + inner.iter().sum::<f64>()),
    }
}

/// Running trapezoidal integral; element `i` is `∫` from the first node to node `i`.
pub fn cumulative_trapezoid(values: &[f64], step: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for pair in values.windows(2) {
        acc += 0.5 * step * (pair[0] + pair[1]);
        out.push(acc);
    }
    out.truncate(values.len());
    out
}

/// Point `x` at which the cumulative integral of a piecewise-linear density
/// reaches `target`.
///
/// `density` and `cdf` are sampled on the uniform grid `x_k = x0 + k·step`,
/// and `cdf` must come from [`cumulative_trapezoid`] of `density`. Within a
/// cell the cumulative integral is quadratic, and the exact root is taken.
pub fn inverse_cdf(density: &[f64], cdf: &[f64], x0: f64, step: f64, target: f64) -> f64 {
    let n = cdf.len();
    debug_assert_eq!(n, density.len());
    if n < 2 || target <= 0.0 {
        return x0;
    }
    if target >= cdf[n - 1] {
        return x0 + step * (n - 1) as f64;
    }
    // first node whose cumulative value reaches the target
    let hi = cdf.partition_point(|&c| c < target).max(1);
    let lo = hi - 1;
    let need = target - cdf[lo];
    let f0 = density[lo];
    let slope = (density[hi] - f0) / step;
    // solve f0·t + slope·t²/2 = need for t in [0, step]
    let t = if slope.abs() * step < 1e-12 * f0.abs().max(f64::MIN_POSITIVE) {
        need / f0
    } else {
        let disc = (f0 * f0 + 2.0 * slope * need).max(0.0);
        // numerically stable root of the quadratic
        2.0 * need / (f0 + disc.sqrt())
    };
    x0 + step * lo as f64 + t.clamp(0.0, step)
}
