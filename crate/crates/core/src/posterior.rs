//! Grid posteriors over the phase `φ ∈ [0, π]`.
//!
//! Under a flat prior the single-pulse posterior of the ideal interferometer
//! is `C · cos^{2N_c}(φ/2) · sin^{2N_d}(φ/2)`, independent of `n̄`. Several
//! pulses multiply, so densities are accumulated as sums of log terms and
//! exponentiated once, after subtracting the maximum.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::photon_model::Outcome;
use crate::quadrature::{cumulative_trapezoid, inverse_cdf, trapezoid};

/// Default number of grid nodes on `[0, π]`.
pub const DEFAULT_GRID_POINTS: usize = 4096;

#[derive(Debug)]
struct GridTables {
    nodes: Vec<f64>,
    step: f64,
    ln_cos2: Vec<f64>,
    ln_sin2: Vec<f64>,
}

/// Uniform grid on `[0, π]`, both endpoints included.
///
/// Cloning is cheap; the node tables are shared.
#[derive(Debug, Clone)]
pub struct PhaseGrid {
    tables: Arc<GridTables>,
}

impl PhaseGrid {
    pub fn new(n_points: usize) -> Result<Self> {
        if n_points < 2 {
            return Err(Error::Precondition(format!("phase grid needs at least 2 nodes, got {n_points}")));
        }
        let last = n_points - 1;
        let step = PI / last as f64;
        let nodes: Vec<f64> = (0..n_points)
            .map(|i| if i == last { PI } else { i as f64 * step })
            .collect();
        let ln_cos2 = nodes
            .iter()
            .enumerate()
            .map(|(i, &phi)| if i == last { f64::NEG_INFINITY } else { 2.0 * (0.5 * phi).cos().ln() })
            .collect();
        let ln_sin2 = nodes
            .iter()
            .enumerate()
            .map(|(i, &phi)| if i == 0 { f64::NEG_INFINITY } else { 2.0 * (0.5 * phi).sin().ln() })
            .collect();
        Ok(Self { tables: Arc::new(GridTables { nodes, step, ln_cos2, ln_sin2 }) })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.tables.nodes
    }

    pub fn len(&self) -> usize {
        self.tables.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        self.tables.step
    }

    /// `ln cos²(φ/2)` at every node (`-∞` at `φ = π`).
    pub fn ln_cos2(&self) -> &[f64] {
        &self.tables.ln_cos2
    }

    /// `ln sin²(φ/2)` at every node (`-∞` at `φ = 0`).
    pub fn ln_sin2(&self) -> &[f64] {
        &self.tables.ln_sin2
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        trapezoid(values, self.step())
    }
}

impl Default for PhaseGrid {
    fn default() -> Self {
        Self::new(DEFAULT_GRID_POINTS).expect("default grid is valid")
    }
}

/// `ln C` with `C = Γ(1 + N_c + N_d) / (Γ(1/2 + N_c) Γ(1/2 + N_d))`.
pub fn ln_normalization_constant(outcome: Outcome) -> f64 {
    let (a, b) = (f64::from(outcome.n_c), f64::from(outcome.n_d));
    ln_gamma(1.0 + a + b) - ln_gamma(0.5 + a) - ln_gamma(0.5 + b)
}

/// The constant that normalizes `cos^{2N_c}(φ/2) sin^{2N_d}(φ/2)` on `[0, π]`.
pub fn normalization_constant(outcome: Outcome) -> f64 {
    ln_normalization_constant(outcome).exp()
}

/// Adds `weight · ln P(φ | outcome)` of the ideal single-pulse posterior to `acc`.
fn add_ideal_log_density(outcome: Outcome, weight: f64, grid: &PhaseGrid, acc: &mut [f64]) {
    let ln_c = ln_normalization_constant(outcome);
    let (nc, nd) = (f64::from(outcome.n_c), f64::from(outcome.n_d));
    for ((slot, &lc), &ls) in acc.iter_mut().zip(grid.ln_cos2()).zip(grid.ln_sin2()) {
        let mut term = ln_c;
        if outcome.n_c > 0 {
            term += nc * lc;
        }
        if outcome.n_d > 0 {
            term += nd * ls;
        }
        *slot += weight * term;
    }
}

/// A per-pulse posterior model: maps one measured outcome to a log density.
pub trait ShotModel: Sync {
    /// Adds `multiplicity · ln P(φ | outcome)` at each grid node to `acc`.
    fn add_log_density(&self, outcome: Outcome, multiplicity: f64, grid: &PhaseGrid, acc: &mut [f64]);
}

/// The analytic single-pulse posterior of the ideal interferometer.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdealShots;

impl ShotModel for IdealShots {
    fn add_log_density(&self, outcome: Outcome, multiplicity: f64, grid: &PhaseGrid, acc: &mut [f64]) {
        add_ideal_log_density(outcome, multiplicity, grid, acc);
    }
}

/// Normalized probability density on a [`PhaseGrid`].
#[derive(Debug, Clone)]
pub struct Posterior {
    grid: PhaseGrid,
    log_density: Vec<f64>,
    density: Vec<f64>,
}

impl Posterior {
    /// Normalizes an unnormalized log density.
    pub fn from_log_density(grid: &PhaseGrid, mut log_density: Vec<f64>) -> Result<Self> {
        if log_density.len() != grid.len() {
            return Err(Error::Precondition(format!(
                "log density has {} values for a {}-node grid",
                log_density.len(),
                grid.len()
            )));
        }
        let max = log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() || log_density.iter().any(|v| v.is_nan()) {
            return Err(Error::DegenerateEvidence);
        }
        let mut density: Vec<f64> = log_density.iter().map(|&l| (l - max).exp()).collect();
        let mass = grid.integrate(&density);
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::DegenerateEvidence);
        }
        density.iter_mut().for_each(|d| *d /= mass);
        let shift = max + mass.ln();
        log_density.iter_mut().for_each(|l| *l -= shift);
        Ok(Self { grid: grid.clone(), log_density, density })
    }

    /// The flat prior `1/π`.
    pub fn uniform(grid: &PhaseGrid) -> Self {
        Self::from_log_density(grid, vec![0.0; grid.len()]).expect("flat density is proper")
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn log_density(&self) -> &[f64] {
        &self.log_density
    }

    pub fn total_mass(&self) -> f64 {
        self.grid.integrate(&self.density)
    }

    /// Posterior mean `∫ φ P(φ) dφ`.
    pub fn mean(&self) -> f64 {
        let weighted: Vec<f64> = self.grid.nodes().iter().zip(&self.density).map(|(phi, d)| phi * d).collect();
        self.grid.integrate(&weighted).clamp(0.0, PI)
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        let weighted: Vec<f64> = self
            .grid
            .nodes()
            .iter()
            .zip(&self.density)
            .map(|(phi, d)| (phi - mean).powi(2) * d)
            .collect();
        self.grid.integrate(&weighted)
    }

    /// Node with the largest density; the first one on ties.
    pub fn mode(&self) -> f64 {
        let mut best = 0;
        for (i, &d) in self.density.iter().enumerate() {
            if d > self.density[best] {
                best = i;
            }
        }
        self.grid.nodes()[best]
    }

    /// Interval around the posterior mean holding `level/2` of the mass on
    /// each side. Mass that would fall beyond `0` or `π` is taken from the
    /// interior side instead.
    pub fn credible_bounds(&self, level: f64) -> Result<(f64, f64)> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::Precondition(format!("credible level must lie in (0, 1), got {level}")));
        }
        let step = self.grid.step();
        let cdf = cumulative_trapezoid(&self.density, step);
        let total = *cdf.last().expect("grid has nodes");
        let at_mean = self.cdf_at(&cdf, self.mean()) / total;

        let mut lower = at_mean - 0.5 * level;
        let mut upper = at_mean + 0.5 * level;
        if lower < 0.0 {
            upper -= lower;
            lower = 0.0;
        }
        if upper > 1.0 {
            lower -= upper - 1.0;
            upper = 1.0;
        }
        let a = inverse_cdf(&self.density, &cdf, 0.0, step, lower.max(0.0) * total);
        let b = inverse_cdf(&self.density, &cdf, 0.0, step, upper.min(1.0) * total);
        Ok((a, b.min(PI)))
    }

    /// Half-width `ΔΘ` of [`Self::credible_bounds`].
    pub fn credible_interval(&self, level: f64) -> Result<f64> {
        let (a, b) = self.credible_bounds(level)?;
        Ok(0.5 * (b - a))
    }

    fn cdf_at(&self, cdf: &[f64], x: f64) -> f64 {
        let step = self.grid.step();
        let last = self.density.len() - 1;
        let lo = ((x / step).floor() as usize).min(last - 1);
        let t = (x - self.grid.nodes()[lo]).clamp(0.0, step);
        let f0 = self.density[lo];
        let slope = (self.density[lo + 1] - f0) / step;
        cdf[lo] + f0 * t + 0.5 * slope * t * t
    }
}

/// Posterior after a single pulse of the ideal interferometer.
pub fn single_shot_posterior(outcome: Outcome, grid: &PhaseGrid) -> Posterior {
    let mut acc = vec![0.0; grid.len()];
    add_ideal_log_density(outcome, 1.0, grid, &mut acc);
    Posterior::from_log_density(grid, acc).expect("ideal single-shot posterior is proper")
}

/// Product of the ideal single-pulse posteriors of every outcome.
pub fn accumulate(outcomes: &[Outcome], grid: &PhaseGrid) -> Result<Posterior> {
    accumulate_with(&IdealShots, outcomes, grid)
}

/// Product of the per-pulse posteriors given by `model`.
///
/// Identical outcomes are grouped before summation, so the result does not
/// depend on the order of `outcomes`. An empty sequence yields the flat prior.
pub fn accumulate_with<M: ShotModel + ?Sized>(model: &M, outcomes: &[Outcome], grid: &PhaseGrid) -> Result<Posterior> {
    if outcomes.is_empty() {
        return Ok(Posterior::uniform(grid));
    }
    let mut tally: BTreeMap<Outcome, u64> = BTreeMap::new();
    for &o in outcomes {
        *tally.entry(o).or_default() += 1;
    }
    let mut acc = vec![0.0; grid.len()];
    for (outcome, count) in tally {
        model.add_log_density(outcome, count as f64, grid, &mut acc);
    }
    Posterior::from_log_density(grid, acc)
}
