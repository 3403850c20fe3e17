//! Seeded Monte Carlo harness: calibration, repeated phase estimations and
//! scans over the true phase.
//!
//! Every replica at every phase draws from its own random stream keyed by
//! `(phase index, replica index)`, so scans give the same numbers however
//! the work is scheduled across threads.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{
    fit_confusion, fit_retrodictive_weights, simulate_calibration, CalibrationData, ConfusionModel, FittedShots,
    NoisyModel, RetrodictiveWeights,
};
use crate::error::{Error, Result};
use crate::estimators::{
    classical_estimate, classical_uncertainty, fit_fringe, ml_estimate, noisy_classical_estimate, ymk_average,
    FringeParams,
};
use crate::fisher::{crlb, fisher_ideal, fisher_numeric, DEFAULT_D_THETA};
use crate::photon_model::{check_phase, InterferometerModel, Outcome, OutcomeSequence, DEFAULT_N_MAX};
use crate::posterior::{accumulate_with, IdealShots, PhaseGrid, Posterior, ShotModel, DEFAULT_GRID_POINTS};
use crate::seeding::{self, Purpose};
use crate::ONE_SIGMA_LEVEL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// Posterior mean with the credible half-width as uncertainty.
    Bayes,
    /// Maximum likelihood.
    Ml,
    /// `arccos(M_p / n̄)`.
    Classical,
    /// Inversion of the fringe fitted to calibration data.
    Fringe,
    /// Per-shot YMK estimates averaged over photon-bearing pulses.
    Ymk,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [Self::Bayes, Self::Ml, Self::Classical, Self::Fringe, Self::Ymk];

    pub fn name(self) -> &'static str {
        match self {
            Self::Bayes => "bayes",
            Self::Ml => "ml",
            Self::Classical => "classical",
            Self::Fringe => "fringe",
            Self::Ymk => "ymk",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown estimator {s:?}")))
    }
}

/// `count` evenly spaced phases from `first·π` to `last·π`.
pub fn phase_grid_in_pi(first: f64, last: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![first * PI],
        _ => (0..count)
            .map(|i| (first + (last - first) * i as f64 / (count - 1) as f64) * PI)
            .collect(),
    }
}

/// θ/π ∈ {0.05, 0.10, …, 0.95}.
pub fn default_theta_grid() -> Vec<f64> {
    (1..=19).map(|i| f64::from(i) * 0.05 * PI).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    /// True phases in radians.
    pub theta_grid: Vec<f64>,
    /// Pulses per estimation.
    pub shots: u64,
    /// Independent estimations per phase.
    pub replicas: u32,
    pub seed: u64,
    /// Misread channel applied to simulated counts.
    pub noise: Option<ConfusionModel>,
    pub estimators: Vec<EstimatorKind>,
    pub grid_points: usize,
    /// Credible level of the reported uncertainty.
    pub level: f64,
    /// Known phases (radians) of the simulated calibration runs.
    pub calibration_phases: Vec<f64>,
    pub calibration_pulses: u64,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            theta_grid: default_theta_grid(),
            shots: 1000,
            replicas: 150,
            seed: 0,
            noise: None,
            estimators: vec![EstimatorKind::Bayes],
            grid_points: DEFAULT_GRID_POINTS,
            level: ONE_SIGMA_LEVEL,
            calibration_phases: default_theta_grid(),
            calibration_pulses: 200_000,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Precondition("shots per estimation must be at least 1".into()));
        }
        if self.replicas == 0 {
            return Err(Error::Precondition("replicas must be at least 1".into()));
        }
        for &theta in self.theta_grid.iter().chain(&self.calibration_phases) {
            check_phase(theta)?;
        }
        if self.estimators.is_empty() {
            return Err(Error::Precondition("at least one estimator is required".into()));
        }
        let mut sorted = self.estimators.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.estimators.len() {
            return Err(Error::Precondition("estimators must not repeat".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Precondition(format!("credible level must lie in (0, 1), got {}", self.level)));
        }
        if self.grid_points < 2 {
            return Err(Error::Precondition("phase grid needs at least 2 nodes".into()));
        }
        if self.needs_calibration() && self.calibration_pulses == 0 {
            return Err(Error::Precondition("calibration needs at least one pulse per phase".into()));
        }
        Ok(())
    }

    fn needs_calibration(&self) -> bool {
        self.noise.is_some() || self.estimators.contains(&EstimatorKind::Fringe)
    }
}

/// Point estimate and credible half-width of one Bayesian estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesEstimate {
    pub theta_est: f64,
    pub delta_theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Estimate {
    value: f64,
    delta: Option<f64>,
}

/// Quantities derived from calibration data.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub data: CalibrationData,
    pub fitted_confusion: Option<ConfusionModel>,
    pub weights: Option<RetrodictiveWeights>,
    pub fringe: Option<FringeParams>,
}

/// A prepared experiment: plan, model, grid and everything fitted from
/// calibration.
#[derive(Debug, Clone)]
pub struct Experiment {
    model: InterferometerModel,
    plan: ExperimentPlan,
    grid: PhaseGrid,
    calibration: Option<Calibration>,
    weights: Option<RetrodictiveWeights>,
    fitted_likelihood: Option<NoisyModel>,
    fitted_shots: Option<FittedShots>,
}

impl Experiment {
    /// Simulates calibration when the plan needs it and fits everything.
    pub fn prepare(model: InterferometerModel, plan: ExperimentPlan) -> Result<Self> {
        Self::from_parts(model, plan, None, None)
    }

    /// Uses recorded calibration data and/or a precomputed weight table in
    /// place of simulated calibration. Missing pieces are simulated or
    /// fitted as in [`Experiment::prepare`].
    pub fn from_parts(
        model: InterferometerModel,
        plan: ExperimentPlan,
        calibration: Option<CalibrationData>,
        weights: Option<RetrodictiveWeights>,
    ) -> Result<Self> {
        plan.validate()?;
        let grid = PhaseGrid::new(plan.grid_points)?;
        let wants_fringe = plan.estimators.contains(&EstimatorKind::Fringe);
        let wants_weights = plan.noise.is_some() && weights.is_none();

        let data = match calibration {
            Some(data) => Some(data),
            None if wants_fringe || wants_weights => {
                let channel = plan.noise.clone().unwrap_or_else(|| ConfusionModel::identity(DEFAULT_N_MAX));
                Some(simulate_calibration(
                    &plan.calibration_phases,
                    plan.calibration_pulses,
                    &channel,
                    &model,
                    plan.seed,
                )?)
            }
            None => None,
        };

        let (mut weights, mut fitted_confusion) = (weights, None);
        if let (Some(_), Some(data)) = (&plan.noise, &data) {
            fitted_confusion = Some(fit_confusion(data)?);
            if weights.is_none() {
                weights = Some(fit_retrodictive_weights(data, &grid)?);
            }
        }
        let fringe = match (&data, wants_fringe) {
            (Some(data), true) => Some(fit_fringe(data)?),
            _ => None,
        };
        let calibration = data.map(|data| Calibration {
            data,
            fitted_confusion: fitted_confusion.clone(),
            weights: weights.clone(),
            fringe,
        });
        let fitted_shots = weights.as_ref().filter(|_| plan.noise.is_some()).map(|w| w.shot_model(&grid));
        let fitted_likelihood = fitted_confusion.map(|k| NoisyModel::new(model, k));
        if plan.noise.is_some() && plan.estimators.contains(&EstimatorKind::Ml) && fitted_likelihood.is_none() {
            return Err(Error::Precondition(
                "maximum likelihood under noise needs calibration data to fit the misread channel".into(),
            ));
        }
        Ok(Self { model, plan, grid, calibration, weights, fitted_likelihood, fitted_shots })
    }

    pub fn model(&self) -> &InterferometerModel {
        &self.model
    }

    pub fn plan(&self) -> &ExperimentPlan {
        &self.plan
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn calibration(&self) -> Option<&Calibration> {
        self.calibration.as_ref()
    }

    /// Retrodictive weights used for noisy posteriors.
    pub fn weights(&self) -> Option<&RetrodictiveWeights> {
        self.weights.as_ref()
    }

    /// The count distribution with the fitted misread channel, if any.
    pub fn fitted_likelihood(&self) -> Option<&NoisyModel> {
        self.fitted_likelihood.as_ref()
    }

    /// Draws `shots` reported outcomes at `theta`, through the configured
    /// misread channel if there is one.
    pub fn sample_outcomes<R: Rng + ?Sized>(&self, theta: f64, shots: u64, rng: &mut R) -> Result<OutcomeSequence> {
        check_phase(theta)?;
        let mut out = Vec::with_capacity(shots as usize);
        for _ in 0..shots {
            let truth = self.model.sample_outcome(theta, rng)?;
            out.push(match &self.plan.noise {
                Some(k) => k.apply_noise(truth, rng),
                None => truth,
            });
        }
        Ok(out)
    }

    fn shot_model(&self) -> &dyn ShotModel {
        match &self.fitted_shots {
            Some(s) => s,
            None => &IdealShots,
        }
    }

    /// Posterior over the phase given reported outcomes, using the fitted
    /// weights when noise is configured.
    pub fn posterior(&self, outcomes: &[Outcome]) -> Result<Posterior> {
        accumulate_with(self.shot_model(), outcomes, &self.grid)
    }

    /// One Bayesian estimation: `shots` pulses at `theta`, posterior mean and
    /// credible half-width.
    pub fn run_estimation<R: Rng + ?Sized>(&self, theta: f64, rng: &mut R) -> Result<BayesEstimate> {
        let outcomes = self.sample_outcomes(theta, self.plan.shots, rng)?;
        let post = self.posterior(&outcomes)?;
        Ok(BayesEstimate { theta_est: post.mean(), delta_theta: post.credible_interval(self.plan.level)? })
    }

    /// Posteriors after the first `p` pulses of one sequence at `theta`, for
    /// each `p` in `checkpoints`.
    pub fn posterior_progression(&self, theta: f64, checkpoints: &[u64]) -> Result<Vec<(u64, Posterior)>> {
        let longest = checkpoints.iter().copied().max().unwrap_or(0);
        let mut rng = seeding::stream(self.plan.seed, Purpose::Progression, 0, 0);
        let outcomes = self.sample_outcomes(theta, longest, &mut rng)?;
        checkpoints
            .iter()
            .map(|&p| Ok((p, self.posterior(&outcomes[..p as usize])?)))
            .collect()
    }

    fn estimate(&self, kind: EstimatorKind, outcomes: &[Outcome]) -> Result<Estimate> {
        let point = |value| Estimate { value, delta: None };
        match kind {
            EstimatorKind::Bayes => {
                let post = self.posterior(outcomes)?;
                Ok(Estimate { value: post.mean(), delta: Some(post.credible_interval(self.plan.level)?) })
            }
            EstimatorKind::Ml => {
                let est = match &self.fitted_likelihood {
                    Some(noisy) if self.plan.noise.is_some() => ml_estimate(outcomes, noisy, &self.grid)?,
                    _ => ml_estimate(outcomes, &self.model, &self.grid)?,
                };
                Ok(point(est.phase))
            }
            EstimatorKind::Classical => Ok(point(classical_estimate(outcomes, self.model.nbar())?)),
            EstimatorKind::Fringe => {
                let fringe = self
                    .calibration
                    .as_ref()
                    .and_then(|c| c.fringe)
                    .expect("fringe is fitted whenever the estimator is requested");
                Ok(point(noisy_classical_estimate(outcomes, &fringe)?))
            }
            EstimatorKind::Ymk => Ok(point(ymk_average(outcomes)?)),
        }
    }

    fn replica(&self, phase_index: usize, replica: u32) -> Result<Vec<Option<Estimate>>> {
        let theta = self.plan.theta_grid[phase_index];
        let mut rng = seeding::stream(self.plan.seed, Purpose::Replica, phase_index as u32, replica);
        let outcomes = self.sample_outcomes(theta, self.plan.shots, &mut rng)?;
        self.plan
            .estimators
            .iter()
            .map(|&kind| match self.estimate(kind, &outcomes) {
                Ok(e) => Ok(Some(e)),
                Err(Error::UndefinedEstimate(_)) => Ok(None),
                Err(e) => Err(e),
            })
            .collect()
    }

    fn run_scan(&self) -> Result<Vec<ScanRecord>> {
        let replicas = self.plan.replicas;
        let jobs: Vec<(usize, u32)> = (0..self.plan.theta_grid.len())
            .flat_map(|i| (0..replicas).map(move |r| (i, r)))
            .collect();
        let results: Vec<Vec<Option<Estimate>>> =
            jobs.par_iter().map(|&(i, r)| self.replica(i, r)).collect::<Result<_>>()?;

        let mut records = Vec::with_capacity(self.plan.theta_grid.len() * self.plan.estimators.len());
        for (i, &theta) in self.plan.theta_grid.iter().enumerate() {
            let block = &results[i * replicas as usize..(i + 1) * replicas as usize];
            for (k, &kind) in self.plan.estimators.iter().enumerate() {
                let estimates: Vec<Estimate> = block.iter().filter_map(|row| row[k]).collect();
                records.push(ScanRecord::summarize(theta, kind, &estimates, self.plan.level));
            }
        }
        Ok(records)
    }

    /// Bias of every estimator at every phase over the replicas.
    pub fn bias_scan(&self) -> Result<ScanResult> {
        Ok(ScanResult { shots: self.plan.shots, records: self.run_scan()?, reference: Vec::new() })
    }

    /// Like [`Experiment::bias_scan`], with the Cramér-Rao and error
    /// propagation curves evaluated at every phase.
    pub fn sensitivity_scan(&self) -> Result<ScanResult> {
        let records = self.run_scan()?;
        let reference = self.plan.theta_grid.iter().map(|&t| self.reference_point(t)).collect::<Result<_>>()?;
        Ok(ScanResult { shots: self.plan.shots, records, reference })
    }

    fn reference_point(&self, theta: f64) -> Result<ReferencePoint> {
        let p = self.plan.shots;
        let crlb_ideal = crlb(fisher_ideal(self.model.nbar())?, p)?;
        let crlb_fit = match (&self.fitted_likelihood, &self.plan.noise) {
            (Some(noisy), Some(_)) => match fisher_numeric(noisy, theta, noisy.confusion.n_max(), DEFAULT_D_THETA) {
                Ok(f) => crlb(f, p).ok(),
                Err(Error::Endpoint { .. }) => None,
                Err(e) => return Err(e),
            },
            _ => None,
        };
        let classical = classical_uncertainty(theta, self.model.nbar(), p).ok();
        Ok(ReferencePoint { theta, crlb_ideal, crlb_fit, classical })
    }
}

/// Replica statistics for one estimator at one phase. Phases are in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub theta: f64,
    pub estimator: EstimatorKind,
    /// Replicas that produced an estimate.
    pub replicas: u32,
    pub mean_est: f64,
    pub bias: f64,
    /// Bayes: mean credible half-width. Point estimators: half-width of
    /// the central interval of the replica estimates at the credible level.
    pub mean_dtheta: Option<f64>,
    pub sd_est: Option<f64>,
    pub sd_dtheta: Option<f64>,
}

fn sample_sd(values: &[f64]) -> Option<f64> {
    let n = values.len();
    (n >= 2).then(|| {
        let mean = values.iter().sum::<f64>() / n as f64;
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl ScanRecord {
    fn summarize(theta: f64, estimator: EstimatorKind, estimates: &[Estimate], level: f64) -> Self {
        let values: Vec<f64> = estimates.iter().map(|e| e.value).collect();
        let n = values.len();
        let mean_est = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
        let deltas: Vec<f64> = estimates.iter().filter_map(|e| e.delta).collect();
        let (mean_dtheta, sd_dtheta) = if estimator == EstimatorKind::Bayes {
            let mean = (!deltas.is_empty()).then(|| deltas.iter().sum::<f64>() / deltas.len() as f64);
            (mean, sample_sd(&deltas))
        } else if n >= 2 {
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let half = 0.5 * (quantile(&sorted, 0.5 + 0.5 * level) - quantile(&sorted, 0.5 - 0.5 * level));
            (Some(half), None)
        } else {
            (None, None)
        };
        Self {
            theta,
            estimator,
            replicas: n as u32,
            mean_est,
            bias: mean_est - theta,
            mean_dtheta,
            sd_est: sample_sd(&values),
            sd_dtheta,
        }
    }

    /// Fewer than two replicas: no scatter can be estimated.
    pub fn is_degenerate(&self) -> bool {
        self.sd_est.is_none()
    }

    /// Standard error of the replica mean.
    pub fn standard_error(&self) -> Option<f64> {
        self.sd_est.map(|sd| sd / f64::from(self.replicas).sqrt())
    }

    /// `|bias|` in units of the standard error of the mean.
    pub fn bias_significance(&self) -> Option<f64> {
        self.standard_error().map(|se| self.bias.abs() / se)
    }

    /// `σ_est / |bias|`.
    pub fn scatter_to_bias(&self) -> Option<f64> {
        self.sd_est.map(|sd| sd / self.bias.abs())
    }
}

/// Bound and error-propagation curves at one phase (radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub theta: f64,
    /// `1/√(p n̄)`.
    pub crlb_ideal: f64,
    /// `1/√(p F_fit(θ))` for the fitted misread channel.
    pub crlb_fit: Option<f64>,
    /// `1/(√(p n̄) sin θ)`; absent where it diverges.
    pub classical: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub shots: u64,
    /// One record per (phase, estimator), phase-major.
    pub records: Vec<ScanRecord>,
    /// Present for sensitivity scans.
    pub reference: Vec<ReferencePoint>,
}

impl ScanResult {
    pub fn records_for(&self, estimator: EstimatorKind) -> impl Iterator<Item = &ScanRecord> {
        self.records.iter().filter(move |r| r.estimator == estimator)
    }
}
