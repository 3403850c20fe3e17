//! Non-Bayesian phase estimators: the arccos inversion of the mean photon
//! number difference (ideal and fitted fringe), the per-shot YMK estimator
//! and maximum likelihood.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::detector::CalibrationData;
use crate::error::{Error, Result};
use crate::lsq;
use crate::photon_model::{check_phase, Outcome, PhaseLikelihood};
use crate::posterior::PhaseGrid;

/// `M_p`: the mean of `N_c − N_d` over the pulses.
pub fn mean_difference(outcomes: &[Outcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Precondition("estimator needs at least one pulse".into()));
    }
    let sum: i64 = outcomes.iter().map(|o| o.difference()).sum();
    Ok(sum as f64 / outcomes.len() as f64)
}

fn clamped_arccos(x: f64) -> f64 {
    x.clamp(-1.0, 1.0).acos()
}

/// `arccos(M_p / n̄)`, with the argument clamped to `[−1, 1]`.
pub fn classical_estimate(outcomes: &[Outcome], nbar: f64) -> Result<f64> {
    if !(nbar.is_finite() && nbar > 0.0) {
        return Err(Error::InvalidModel(format!("mean photon number must be positive, got {nbar}")));
    }
    Ok(clamped_arccos(mean_difference(outcomes)? / nbar))
}

/// Error-propagation uncertainty `1 / (√(p n̄) sin θ)` of the arccos estimator.
pub fn classical_uncertainty(theta: f64, nbar: f64, p: u64) -> Result<f64> {
    check_phase(theta)?;
    if p == 0 || nbar.is_nan() || nbar <= 0.0 {
        return Err(Error::Precondition("need p ≥ 1 and n̄ > 0".into()));
    }
    let s = theta.sin();
    if theta == 0.0 || theta == PI || s <= 0.0 {
        return Err(Error::Divergent(theta));
    }
    Ok(1.0 / ((p as f64 * nbar).sqrt() * s))
}

/// Fringe `M(θ) = amplitude · cos(a + θ) + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FringeParams {
    pub a: f64,
    pub b: f64,
    pub amplitude: f64,
}

impl FringeParams {
    /// The ideal fringe `n̄ cos θ`.
    pub fn ideal(nbar: f64) -> Self {
        Self { a: 0.0, b: 0.0, amplitude: nbar }
    }

    pub fn value(&self, theta: f64) -> f64 {
        self.amplitude * (self.a + theta).cos() + self.b
    }
}

/// Least-squares fit of the per-phase mean difference to a fringe.
///
/// Solved linearly as `α cos θ + β sin θ + b`, then `amplitude = √(α² + β²)`
/// and `a = atan2(−β, α)`.
pub fn fit_fringe(calib: &CalibrationData) -> Result<FringeParams> {
    let phases = calib.phases();
    let mut distinct = phases.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Underdetermined(format!(
            "fringe fit needs 3 distinct phases, got {}",
            distinct.len()
        )));
    }
    let x = DMatrix::from_fn(phases.len(), 3, |j, k| match k {
        0 => phases[j].cos(),
        1 => phases[j].sin(),
        _ => 1.0,
    });
    let y = DVector::from_fn(phases.len(), |j, _| calib.mean_difference(j));
    let coef = lsq::least_squares(&x, &y)
        .ok_or_else(|| Error::Underdetermined("fringe design matrix is rank deficient".into()))?;
    let (alpha, beta, b) = (coef[0], coef[1], coef[2]);
    let amplitude = alpha.hypot(beta);
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if amplitude.is_nan() || amplitude <= 1e-9 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NoFringe(amplitude));
    }
    Ok(FringeParams { a: (-beta).atan2(alpha), b, amplitude })
}

/// Inverts a fitted fringe: the `θ ∈ [0, π]` with
/// `amplitude · cos(a + θ) + b = M_p`, the argument of the arccos clamped to
/// `[−1, 1]`. When no phase in range reaches `M_p`, the closer end of the
/// fringe (0 or π) is returned. Within `|a|` of an end two phases share a
/// fringe value; the branch `arccos(·) − a` is preferred.
pub fn noisy_classical_estimate(outcomes: &[Outcome], params: &FringeParams) -> Result<f64> {
    if params.amplitude.is_nan() || params.amplitude <= 0.0 {
        return Err(Error::Precondition("fringe amplitude must be positive".into()));
    }
    let m = mean_difference(outcomes)?;
    let r = clamped_arccos((m - params.b) / params.amplitude);
    let tol = 1e-12;
    for base in [r - params.a, -r - params.a] {
        for turn in [0.0, 2.0 * PI, -2.0 * PI] {
            let theta = base + turn;
            if (-tol..=PI + tol).contains(&theta) {
                return Ok(theta.clamp(0.0, PI));
            }
        }
    }
    let miss = |theta: f64| (params.value(theta) - m).abs();
    Ok(if miss(0.0) <= miss(PI) { 0.0 } else { PI })
}

/// `arccos[(N_c − N_d) / (N_c + N_d)]` for one pulse.
pub fn ymk_estimate(outcome: Outcome) -> Result<f64> {
    let total = outcome.total();
    if total == 0 {
        return Err(Error::UndefinedEstimate("no photons detected"));
    }
    Ok(clamped_arccos(outcome.difference() as f64 / f64::from(total)))
}

/// Per-shot YMK estimates averaged over the pulses that detected photons.
pub fn ymk_average(outcomes: &[Outcome]) -> Result<f64> {
    let (sum, n) = outcomes
        .iter()
        .filter_map(|&o| ymk_estimate(o).ok())
        .fold((0.0, 0u64), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(Error::UndefinedEstimate("no pulse detected photons"));
    }
    Ok(sum / n as f64)
}

/// Result of [`ml_estimate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlEstimate {
    pub phase: f64,
    /// The likelihood was constant over the grid; `phase` is then `π/2`.
    pub flat: bool,
}

const GOLDEN_ITERATIONS: usize = 80;

/// Maximum of the summed log-likelihood: grid argmax (first node on ties),
/// refined by golden-section search between the neighbouring nodes.
pub fn ml_estimate<L: PhaseLikelihood + ?Sized>(outcomes: &[Outcome], model: &L, grid: &PhaseGrid) -> Result<MlEstimate> {
    if outcomes.is_empty() {
        return Err(Error::Precondition("estimator needs at least one pulse".into()));
    }
    let mut tally: BTreeMap<Outcome, f64> = BTreeMap::new();
    for &o in outcomes {
        *tally.entry(o).or_default() += 1.0;
    }
    let log_lik = |phi: f64| -> f64 {
        tally.iter().map(|(&o, &n)| {
            let l = model.ln_probability(phi, o);
            if l == f64::NEG_INFINITY { l } else { n * l }
        }).sum()
    };
    let values: Vec<f64> = grid.nodes().iter().map(|&phi| log_lik(phi)).collect();

    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] || (values[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    let top = values[best];
    if !top.is_finite() {
        return Err(Error::DegenerateEvidence);
    }
    let spread = values
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max((v - top).abs()));
    if values.iter().all(|v| v.is_finite()) && spread <= 1e-12 * top.abs().max(1.0) {
        return Ok(MlEstimate { phase: PI / 2.0, flat: true });
    }

    let nodes = grid.nodes();
    let lo = nodes[best.saturating_sub(1)];
    let hi = nodes[(best + 1).min(nodes.len() - 1)];
    let (x, fx) = golden_section_max(&log_lik, lo, hi);
    let phase = if fx > top { x } else { nodes[best] };
    Ok(MlEstimate { phase, flat: false })
}

fn golden_section_max(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> (f64, f64) {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..GOLDEN_ITERATIONS {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    if f1 >= f2 { (x1, f1) } else { (x2, f2) }
}
