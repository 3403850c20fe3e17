//! Fisher information of the count distribution and the Cramér-Rao bound.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::photon_model::{Outcome, PhaseLikelihood};

/// Central-difference step in radians.
pub const DEFAULT_D_THETA: f64 = 1e-5;

/// Outcomes less likely than this are left out of the sum.
pub const SKIP_PROBABILITY: f64 = 1e-15;

/// `F(θ) = n̄` for coherent light and vacuum, independent of θ.
pub fn fisher_ideal(nbar: f64) -> Result<f64> {
    if !(nbar.is_finite() && nbar > 0.0) {
        return Err(Error::InvalidModel(format!("mean photon number must be positive, got {nbar}")));
    }
    Ok(nbar)
}

fn check_stencil(theta: f64, d_theta: f64, reach: f64) -> Result<()> {
    if !(d_theta.is_finite() && d_theta > 0.0) {
        return Err(Error::Precondition(format!("finite-difference step must be positive, got {d_theta}")));
    }
    if !theta.is_finite() || theta - reach * d_theta < 0.0 || theta + reach * d_theta > PI {
        return Err(Error::Endpoint { theta, step: d_theta });
    }
    Ok(())
}

/// `Σ (∂P/∂θ)² / P` over outcomes with both counts at most `n_max`, with the
/// derivative taken by central differences.
pub fn fisher_numeric<L: PhaseLikelihood + ?Sized>(model: &L, theta: f64, n_max: u32, d_theta: f64) -> Result<f64> {
    check_stencil(theta, d_theta, 1.0)?;
    Ok(fisher_sum(model, theta, n_max, |o| {
        (model.probability(theta + d_theta, o) - model.probability(theta - d_theta, o)) / (2.0 * d_theta)
    }))
}

fn fisher_sum<L: PhaseLikelihood + ?Sized>(model: &L, theta: f64, n_max: u32, derivative: impl Fn(Outcome) -> f64) -> f64 {
    let top = model.max_count().map_or(n_max, |m| m.min(n_max));
    let mut total = 0.0;
    for a in 0..=top {
        for b in 0..=top {
            let o = Outcome::new(a, b);
            let p = model.probability(theta, o);
            if p < SKIP_PROBABILITY {
                continue;
            }
            total += derivative(o).powi(2) / p;
        }
    }
    total
}

/// `F(θ)` at every phase in `thetas`, computed in parallel.
pub fn fisher_curve<L: PhaseLikelihood + ?Sized>(model: &L, thetas: &[f64], n_max: u32, d_theta: f64) -> Result<Vec<f64>> {
    thetas.par_iter().map(|&t| fisher_numeric(model, t, n_max, d_theta)).collect()
}

/// `1 / √(p F)`.
pub fn crlb(fisher: f64, p: u64) -> Result<f64> {
    if !fisher.is_finite() || fisher <= 0.0 {
        return Err(Error::NonPositiveFisher(fisher));
    }
    if p == 0 {
        return Err(Error::Precondition("need at least one pulse".into()));
    }
    Ok(1.0 / (p as f64 * fisher).sqrt())
}
