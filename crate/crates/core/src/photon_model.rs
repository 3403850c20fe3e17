//! Ideal photon-count statistics of a lossless Mach-Zehnder interferometer
//! with a coherent state in one input port and vacuum in the other.
//!
//! The two output ports carry independent coherent states, so the joint
//! count distribution is a product of two Poisson laws with means
//! `n̄·cos²(φ/2)` and `n̄·sin²(φ/2)`. Detection losses are folded into `n̄`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default truncation for sums over outcomes.
pub const DEFAULT_N_MAX: u32 = 25;

/// Probability mass allowed outside the truncated outcome square.
pub const TAIL_TOLERANCE: f64 = 1e-9;

/// Photon counts registered at ports c and d for one pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Outcome {
    pub n_c: u32,
    pub n_d: u32,
}

impl Outcome {
    pub const fn new(n_c: u32, n_d: u32) -> Self {
        Self { n_c, n_d }
    }

    pub fn total(self) -> u32 {
        self.n_c + self.n_d
    }

    pub fn difference(self) -> i64 {
        i64::from(self.n_c) - i64::from(self.n_d)
    }
}

/// The outcomes of the `p` pulses that make up one phase estimation.
pub type OutcomeSequence = Vec<Outcome>;

/// Anything that assigns a probability `P(outcome | φ)` to a phase.
///
/// Implementors may assume `phi` lies in `[0, π]`; callers check the domain.
pub trait PhaseLikelihood: Sync {
    fn probability(&self, phi: f64, outcome: Outcome) -> f64;

    fn ln_probability(&self, phi: f64, outcome: Outcome) -> f64 {
        self.probability(phi, outcome).ln()
    }

    /// Largest count per port that can be reported, if bounded.
    fn max_count(&self) -> Option<u32> {
        None
    }
}

pub(crate) fn check_phase(phi: f64) -> Result<()> {
    if (0.0..=PI).contains(&phi) {
        Ok(())
    } else {
        Err(Error::PhaseDomain(phi))
    }
}

/// `ln P(k; μ)` for a Poisson law, with `P(0; 0) = 1`.
pub(crate) fn ln_poisson(k: u32, mean: f64) -> f64 {
    if k == 0 {
        return -mean;
    }
    if mean == 0.0 {
        return f64::NEG_INFINITY;
    }
    f64::from(k) * mean.ln() - mean - ln_factorial(k)
}

pub(crate) fn ln_factorial(k: u32) -> f64 {
    statrs::function::gamma::ln_gamma(f64::from(k) + 1.0)
}

/// Poisson probabilities for counts `0..n_max`, with everything at or above
/// `n_max` lumped into the last bin.
pub(crate) fn folded_poisson(mean: f64, n_max: u32) -> Vec<f64> {
    let mut pmf = Vec::with_capacity(n_max as usize + 1);
    let mut term = (-mean).exp();
    let mut below = 0.0;
    for k in 0..n_max {
        pmf.push(term);
        below += term;
        term *= mean / f64::from(k + 1);
    }
    pmf.push((1.0 - below).max(0.0));
    pmf
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterferometerModel {
    nbar: f64,
    n_max: u32,
}

impl InterferometerModel {
    pub fn new(nbar: f64) -> Result<Self> {
        Self::with_truncation(nbar, DEFAULT_N_MAX)
    }

    /// Rejects truncations that leave more than [`TAIL_TOLERANCE`] of the
    /// probability mass outside `{0..n_max}²`.
    pub fn with_truncation(nbar: f64, n_max: u32) -> Result<Self> {
        if !(nbar.is_finite() && nbar > 0.0) {
            return Err(Error::InvalidModel(format!("mean photon number must be positive, got {nbar}")));
        }
        // Each port's mean is at most n̄, so the joint tail is bounded by
        // twice the single-port Poisson(n̄) tail.
        let tail = folded_poisson(nbar, n_max + 1)[n_max as usize + 1];
        if 2.0 * tail.max(0.0) > TAIL_TOLERANCE {
            return Err(Error::InvalidModel(format!(
                "truncation n_max = {n_max} leaves tail mass {tail:e} for n̄ = {nbar}"
            )));
        }
        Ok(Self { nbar, n_max })
    }

    pub fn nbar(&self) -> f64 {
        self.nbar
    }

    pub fn n_max(&self) -> u32 {
        self.n_max
    }

    /// Mean photon numbers `(μ_c, μ_d)` at the two output ports.
    pub fn output_means(&self, phi: f64) -> Result<(f64, f64)> {
        check_phase(phi)?;
        Ok(self.means_unchecked(phi))
    }

    pub(crate) fn means_unchecked(&self, phi: f64) -> (f64, f64) {
        let half = 0.5 * phi;
        let (s, c) = half.sin_cos();
        // The last grid node is the f64 nearest π; treat it as exactly π.
        if phi == PI {
            return (0.0, self.nbar);
        }
        (self.nbar * c * c, self.nbar * s * s)
    }

    /// Joint probability `P(N_c, N_d | φ)`.
    pub fn likelihood(&self, phi: f64, outcome: Outcome) -> Result<f64> {
        check_phase(phi)?;
        Ok(self.probability(phi, outcome))
    }

    /// Draws the counts of one pulse.
    pub fn sample_outcome<R: Rng + ?Sized>(&self, phi: f64, rng: &mut R) -> Result<Outcome> {
        let (mu_c, mu_d) = self.output_means(phi)?;
        Ok(Outcome::new(sample_poisson(mu_c, rng), sample_poisson(mu_d, rng)))
    }

    pub fn sample_sequence<R: Rng + ?Sized>(&self, phi: f64, shots: usize, rng: &mut R) -> Result<OutcomeSequence> {
        let (mu_c, mu_d) = self.output_means(phi)?;
        Ok((0..shots)
            .map(|_| Outcome::new(sample_poisson(mu_c, rng), sample_poisson(mu_d, rng)))
            .collect())
    }
}

impl PhaseLikelihood for InterferometerModel {
    fn probability(&self, phi: f64, outcome: Outcome) -> f64 {
        self.ln_probability(phi, outcome).exp()
    }

    fn ln_probability(&self, phi: f64, outcome: Outcome) -> f64 {
        let (mu_c, mu_d) = self.means_unchecked(phi);
        ln_poisson(outcome.n_c, mu_c) + ln_poisson(outcome.n_d, mu_d)
    }
}

pub(crate) fn sample_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    // Means here never exceed n̄, far below u32 range.
    let poisson = Poisson::new(mean).expect("finite positive Poisson mean");
    poisson.sample(rng) as u32
}
