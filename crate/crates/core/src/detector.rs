//! Imperfect photon-number-resolving detectors.
//!
//! Each detector misreads its photon number through a column-stochastic
//! confusion matrix `K[m|t]` (report `m` when `t` photons arrived); counts
//! above `n_max` are folded into `n_max`. The two detectors misread
//! independently.
//!
//! A noisy single-pulse posterior is a mixture of ideal posteriors,
//! `P_fit(φ|N) = Σ_{N'} W(N'|N) P(φ|N')`, where `W(N'|N)` is the probability
//! that `N'` photons were present given that `N` were reported. Under a flat
//! phase prior the mixture is exact when `W` is the Bayes retrodiction of the
//! forward channel with the phase-averaged count distribution as prior.
//!
//! Calibration recovers the forward matrices from the per-detector count
//! frequencies recorded at known phases (non-negative least squares, refined
//! to the multinomial maximum likelihood) and then derives `W` by that
//! retrodiction.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsq;
use crate::photon_model::{check_phase, folded_poisson, InterferometerModel, Outcome, PhaseLikelihood};
use crate::posterior::{ln_normalization_constant, PhaseGrid, Posterior, ShotModel};
use crate::seeding::{self, Purpose};

/// Largest count the detectors in the reference setup can resolve.
pub const DEFAULT_DETECTOR_N_MAX: u32 = 4;

const COLUMN_TOLERANCE: f64 = 1e-12;
const ROW_TOLERANCE: f64 = 1e-9;

/// Per-detector forward misread probabilities.
///
/// `forward_c[m][t]` is the probability that detector c reports `m` photons
/// when `t` were present; every column sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConfusionRepr")]
pub struct ConfusionModel {
    n_max: u32,
    forward_c: Vec<Vec<f64>>,
    forward_d: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct ConfusionRepr {
    n_max: u32,
    forward_c: Vec<Vec<f64>>,
    forward_d: Vec<Vec<f64>>,
}

impl TryFrom<ConfusionRepr> for ConfusionModel {
    type Error = Error;

    fn try_from(raw: ConfusionRepr) -> Result<Self> {
        Self::new(raw.n_max, raw.forward_c, raw.forward_d)
    }
}

fn validate_matrix(name: &str, n_max: u32, k: &[Vec<f64>]) -> Result<()> {
    let size = n_max as usize + 1;
    if k.len() != size || k.iter().any(|row| row.len() != size) {
        return Err(Error::InvalidModel(format!("{name} must be {size}×{size}")));
    }
    for t in 0..size {
        let mut column = 0.0;
        for (m, row) in k.iter().enumerate() {
            let v = row[t];
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidModel(format!("{name}[{m}][{t}] = {v} is not a probability")));
            }
            column += v;
        }
        if (column - 1.0).abs() > COLUMN_TOLERANCE {
            return Err(Error::InvalidModel(format!("{name} column {t} sums to {column}")));
        }
    }
    Ok(())
}

impl ConfusionModel {
    pub fn new(n_max: u32, forward_c: Vec<Vec<f64>>, forward_d: Vec<Vec<f64>>) -> Result<Self> {
        validate_matrix("forward_c", n_max, &forward_c)?;
        validate_matrix("forward_d", n_max, &forward_d)?;
        Ok(Self { n_max, forward_c, forward_d })
    }

    /// Both detectors share the matrix `k`.
    pub fn symmetric(n_max: u32, k: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(n_max, k.clone(), k)
    }

    /// Perfect photon counting up to `n_max`.
    pub fn identity(n_max: u32) -> Self {
        let size = n_max as usize + 1;
        let k: Vec<Vec<f64>> = (0..size)
            .map(|m| (0..size).map(|t| if m == t { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { n_max, forward_c: k.clone(), forward_d: k }
    }

    /// Detectors that always report zero.
    pub fn dead(n_max: u32) -> Self {
        let size = n_max as usize + 1;
        let k: Vec<Vec<f64>> = (0..size)
            .map(|m| vec![if m == 0 { 1.0 } else { 0.0 }; size])
            .collect();
        Self { n_max, forward_c: k.clone(), forward_d: k }
    }

    /// Nearest-neighbour misreads: `t` photons are reported as `t − 1` with
    /// probability `down[t]` and as `t + 1` with probability `up[t]`.
    /// `up[0]` plays the role of a dark-count probability.
    pub fn from_misread_rates(n_max: u32, down: &[f64], up: &[f64]) -> Result<Self> {
        let size = n_max as usize + 1;
        if down.len() != size || up.len() != size {
            return Err(Error::InvalidModel(format!("misread rates need {size} entries")));
        }
        if down[0] != 0.0 || up[size - 1] != 0.0 {
            return Err(Error::InvalidModel("cannot misread below 0 or above n_max".into()));
        }
        let mut k = vec![vec![0.0; size]; size];
        for t in 0..size {
            let stay = 1.0 - down[t] - up[t];
            if !(0.0..=1.0).contains(&stay) || down[t] < 0.0 || up[t] < 0.0 {
                return Err(Error::InvalidModel(format!("misread rates for {t} photons are not probabilities")));
            }
            k[t][t] = stay;
            if t > 0 {
                k[t - 1][t] = down[t];
            }
            if t + 1 < size {
                k[t + 1][t] = up[t];
            }
        }
        Self::symmetric(n_max, k)
    }

    /// A detector regime whose retrodictive diagonals at (0,0), (0,1),
    /// (1,1) and (0,2) come out near 0.55, 0.64, 0.68 and 0.87 for
    /// `n̄ = 1.08`: single photons are frequently missed, higher photon
    /// numbers are occasionally under-counted, and there are no dark counts.
    pub fn reference_regime() -> Self {
        Self::from_misread_rates(
            DEFAULT_DETECTOR_N_MAX,
            &[0.0, 0.70, 0.24, 0.035, 0.035],
            &[0.0, 0.0025, 0.0025, 0.0025, 0.0],
        )
        .expect("reference rates are valid")
    }

    pub fn n_max(&self) -> u32 {
        self.n_max
    }

    pub fn forward_c(&self) -> &[Vec<f64>] {
        &self.forward_c
    }

    pub fn forward_d(&self) -> &[Vec<f64>] {
        &self.forward_d
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.n_max)
    }

    fn fold(&self, count: u32) -> usize {
        count.min(self.n_max) as usize
    }

    fn read<R: Rng + ?Sized>(k: &[Vec<f64>], t: usize, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (m, row) in k.iter().enumerate() {
            acc += row[t];
            if u < acc {
                return m as u32;
            }
        }
        // rounding left u above the last partial sum: return the last
        // reachable report
        k.iter().rposition(|row| row[t] > 0.0).unwrap_or(t) as u32
    }

    /// Passes a true outcome through both detectors.
    pub fn apply_noise<R: Rng + ?Sized>(&self, true_outcome: Outcome, rng: &mut R) -> Outcome {
        let n_c = Self::read(&self.forward_c, self.fold(true_outcome.n_c), rng);
        let n_d = Self::read(&self.forward_d, self.fold(true_outcome.n_d), rng);
        Outcome::new(n_c, n_d)
    }

    /// `Σ_t K[m|t] q[t]` for a folded count distribution `q`.
    fn reported(k: &[Vec<f64>], m: usize, q: &[f64]) -> f64 {
        k[m].iter().zip(q).map(|(a, b)| a * b).sum()
    }
}

/// The ideal interferometer seen through imperfect detectors.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyModel {
    pub ideal: InterferometerModel,
    pub confusion: ConfusionModel,
}

impl NoisyModel {
    pub fn new(ideal: InterferometerModel, confusion: ConfusionModel) -> Self {
        Self { ideal, confusion }
    }

    pub fn sample_outcome<R: Rng + ?Sized>(&self, phi: f64, rng: &mut R) -> Result<Outcome> {
        let truth = self.ideal.sample_outcome(phi, rng)?;
        Ok(self.confusion.apply_noise(truth, rng))
    }
}

impl PhaseLikelihood for NoisyModel {
    fn probability(&self, phi: f64, outcome: Outcome) -> f64 {
        let n_max = self.confusion.n_max;
        if outcome.n_c > n_max || outcome.n_d > n_max {
            return 0.0;
        }
        let (mu_c, mu_d) = self.ideal.means_unchecked(phi);
        let q_c = folded_poisson(mu_c, n_max);
        let q_d = folded_poisson(mu_d, n_max);
        ConfusionModel::reported(&self.confusion.forward_c, outcome.n_c as usize, &q_c)
            * ConfusionModel::reported(&self.confusion.forward_d, outcome.n_d as usize, &q_d)
    }

    fn max_count(&self) -> Option<u32> {
        Some(self.confusion.n_max)
    }
}

/// `P_fit(N_c, N_d | φ)`: the ideal joint distribution pushed through the
/// misread channel.
pub fn noisy_joint_likelihood(
    phi: f64,
    measured: Outcome,
    confusion: &ConfusionModel,
    ideal: &InterferometerModel,
) -> Result<f64> {
    check_phase(phi)?;
    Ok(NoisyModel::new(*ideal, confusion.clone()).probability(phi, measured))
}

/// Joint count histograms recorded at known phases.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationData {
    nbar: f64,
    n_max: u32,
    phases: Vec<f64>,
    /// `histograms[j][n_c·(n_max+1) + n_d]`
    histograms: Vec<Vec<u64>>,
}

impl CalibrationData {
    /// Builds calibration data from recorded pulses; counts above `n_max`
    /// are folded into `n_max`.
    pub fn from_recorded(nbar: f64, n_max: u32, runs: &[(f64, Vec<Outcome>)]) -> Result<Self> {
        let size = n_max as usize + 1;
        let mut phases = Vec::with_capacity(runs.len());
        let mut histograms = Vec::with_capacity(runs.len());
        for (phi, outcomes) in runs {
            let mut h = vec![0u64; size * size];
            for o in outcomes {
                h[o.n_c.min(n_max) as usize * size + o.n_d.min(n_max) as usize] += 1;
            }
            phases.push(*phi);
            histograms.push(h);
        }
        Self::from_histograms(nbar, n_max, phases, histograms)
    }

    pub fn from_histograms(nbar: f64, n_max: u32, phases: Vec<f64>, histograms: Vec<Vec<u64>>) -> Result<Self> {
        let size = (n_max as usize + 1).pow(2);
        if phases.is_empty() {
            return Err(Error::Precondition("calibration needs at least one phase".into()));
        }
        if phases.len() != histograms.len() || histograms.iter().any(|h| h.len() != size) {
            return Err(Error::Precondition("histogram shape does not match phases and n_max".into()));
        }
        for &phi in &phases {
            check_phase(phi)?;
        }
        if histograms.iter().any(|h| h.iter().sum::<u64>() == 0) {
            return Err(Error::Precondition("every calibration phase needs at least one pulse".into()));
        }
        if !(nbar.is_finite() && nbar > 0.0) {
            return Err(Error::InvalidModel(format!("mean photon number must be positive, got {nbar}")));
        }
        Ok(Self { nbar, n_max, phases, histograms })
    }

    pub fn nbar(&self) -> f64 {
        self.nbar
    }

    pub fn n_max(&self) -> u32 {
        self.n_max
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn histograms(&self) -> &[Vec<u64>] {
        &self.histograms
    }

    fn index(&self, outcome: Outcome) -> Option<usize> {
        let size = self.n_max as usize + 1;
        (outcome.n_c <= self.n_max && outcome.n_d <= self.n_max)
            .then(|| outcome.n_c as usize * size + outcome.n_d as usize)
    }

    pub fn pulses(&self, phase_index: usize) -> u64 {
        self.histograms[phase_index].iter().sum()
    }

    pub fn count(&self, phase_index: usize, outcome: Outcome) -> u64 {
        self.index(outcome).map_or(0, |i| self.histograms[phase_index][i])
    }

    /// Total occurrences of `outcome` across every phase.
    pub fn total_count(&self, outcome: Outcome) -> u64 {
        (0..self.phases.len()).map(|j| self.count(j, outcome)).sum()
    }

    /// Average of `N_c − N_d` at one calibration phase.
    pub fn mean_difference(&self, phase_index: usize) -> f64 {
        let size = self.n_max as usize + 1;
        let h = &self.histograms[phase_index];
        let diff: f64 = h
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f64 * ((i / size) as f64 - (i % size) as f64))
            .sum();
        diff / self.pulses(phase_index) as f64
    }

    /// Empirical `P(φ_j | outcome)` by Bayes inversion across the
    /// calibration phases with a flat prior: the relative frequency of
    /// `outcome` at each phase, scaled so that its average over the phase
    /// set is `1/π`. `None` if the outcome never occurred.
    pub fn empirical_posterior(&self, outcome: Outcome) -> Option<Vec<f64>> {
        let freqs: Vec<f64> = (0..self.phases.len())
            .map(|j| self.count(j, outcome) as f64 / self.pulses(j) as f64)
            .collect();
        let mean = freqs.iter().sum::<f64>() / freqs.len() as f64;
        (mean > 0.0).then(|| freqs.iter().map(|f| f / (PI * mean)).collect())
    }

    /// Frequency with which one detector reported `m` photons at phase `j`.
    fn port_frequency(&self, port: Port, phase_index: usize, m: usize) -> f64 {
        let size = self.n_max as usize + 1;
        let h = &self.histograms[phase_index];
        let hits: u64 = match port {
            Port::C => h[m * size..(m + 1) * size].iter().sum(),
            Port::D => (0..size).map(|a| h[a * size + m]).sum(),
        };
        hits as f64 / self.pulses(phase_index) as f64
    }
}

#[derive(Debug, Clone, Copy)]
enum Port {
    C,
    D,
}

/// Simulates `pulses_per_phase` pulses at each known phase and histograms
/// the reported counts. Each phase draws from its own stream of `seed`.
pub fn simulate_calibration(
    phases: &[f64],
    pulses_per_phase: u64,
    confusion: &ConfusionModel,
    ideal: &InterferometerModel,
    seed: u64,
) -> Result<CalibrationData> {
    if pulses_per_phase == 0 {
        return Err(Error::Precondition("calibration needs at least one pulse per phase".into()));
    }
    if phases.is_empty() {
        return Err(Error::Precondition("calibration needs at least one phase".into()));
    }
    for &phi in phases {
        check_phase(phi)?;
    }
    let size = confusion.n_max as usize + 1;
    let noisy = NoisyModel::new(*ideal, confusion.clone());
    let histograms = phases
        .par_iter()
        .enumerate()
        .map(|(j, &phi)| {
            let mut rng = seeding::stream(seed, Purpose::Calibration, j as u32, 0);
            let mut h = vec![0u64; size * size];
            for _ in 0..pulses_per_phase {
                let o = noisy.sample_outcome(phi, &mut rng).expect("phase checked above");
                h[o.n_c as usize * size + o.n_d as usize] += 1;
            }
            h
        })
        .collect();
    CalibrationData::from_histograms(ideal.nbar(), confusion.n_max, phases.to_vec(), histograms)
}

/// Estimates both forward confusion matrices from calibration frequencies.
///
/// For each detector and each reported count `m`, the frequencies across
/// the calibration phases are fitted by a non-negative combination of the
/// folded Poisson probabilities of the true count. The renormalized result
/// seeds an expectation-maximization pass over the raw counts.
pub fn fit_confusion(calib: &CalibrationData) -> Result<ConfusionModel> {
    let size = calib.n_max as usize + 1;
    let mut distinct = calib.phases.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < size {
        return Err(Error::RankDeficient(format!(
            "{} distinct calibration phases cannot resolve {size} photon numbers",
            distinct.len()
        )));
    }
    let ideal = InterferometerModel::new(calib.nbar)?;
    let forward_c = fit_port(calib, &ideal, Port::C)?;
    let forward_d = fit_port(calib, &ideal, Port::D)?;
    ConfusionModel::new(calib.n_max, forward_c, forward_d)
}

fn fit_port(calib: &CalibrationData, ideal: &InterferometerModel, port: Port) -> Result<Vec<Vec<f64>>> {
    let size = calib.n_max as usize + 1;
    let rows = calib.phases.len();
    let mut basis = DMatrix::zeros(rows, size);
    for (j, &phi) in calib.phases.iter().enumerate() {
        let (mu_c, mu_d) = ideal.means_unchecked(phi);
        let mu = match port {
            Port::C => mu_c,
            Port::D => mu_d,
        };
        for (t, q) in folded_poisson(mu, calib.n_max).into_iter().enumerate() {
            basis[(j, t)] = q;
        }
    }
    if lsq::rank(&basis) < size {
        return Err(Error::RankDeficient(format!(
            "photon-number basis has rank {} < {size} over the calibration phases",
            lsq::rank(&basis)
        )));
    }
    let mut k = vec![vec![0.0; size]; size];
    for (m, row) in k.iter_mut().enumerate() {
        // weight each phase by the inverse binomial standard error of its
        // frequency, floored at one count
        let scale: Vec<f64> = (0..rows)
            .map(|j| {
                let n = calib.pulses(j) as f64;
                let f = calib.port_frequency(port, j, m).max(1.0 / n);
                (n / (f * (1.0 - f).max(1.0 / n))).sqrt()
            })
            .collect();
        let a = DMatrix::from_fn(rows, size, |j, t| basis[(j, t)] * scale[j]);
        let y = DVector::from_fn(rows, |j, _| calib.port_frequency(port, j, m) * scale[j]);
        let x = lsq::nnls(&a, &y);
        row.copy_from_slice(x.as_slice());
    }
    for t in 0..size {
        let column: f64 = k.iter().map(|row| row[t]).sum();
        if column <= 0.0 {
            return Err(Error::RankDeficient(format!("no reported count explains {t} true photons")));
        }
        for row in k.iter_mut() {
            row[t] = (row[t] / column).min(1.0);
        }
        // restore an exact unit sum after rounding
        let column: f64 = k.iter().map(|row| row[t]).sum();
        let largest = (0..size).max_by(|&a, &b| k[a][t].total_cmp(&k[b][t])).expect("non-empty");
        k[largest][t] += 1.0 - column;
    }
    Ok(refine_by_em(calib, &basis, port, k))
}

/// Maximum-likelihood refinement of one forward matrix by expectation
/// maximization over the multinomial port counts, which keeps every column
/// exactly stochastic. Starts from `start` blended with a uniform matrix so
/// that entries clamped to zero can move.
fn refine_by_em(calib: &CalibrationData, basis: &DMatrix<f64>, port: Port, start: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    const MAX_ITERATIONS: usize = 20_000;
    const CONVERGED: f64 = 1e-11;
    let size = start.len();
    let rows = basis.nrows();
    let hits: Vec<Vec<f64>> = (0..rows)
        .map(|j| (0..size).map(|m| calib.port_frequency(port, j, m) * calib.pulses(j) as f64).collect())
        .collect();
    let mut k: Vec<Vec<f64>> = start
        .iter()
        .map(|row| row.iter().map(|v| 0.9 * v + 0.1 / size as f64).collect())
        .collect();
    for _ in 0..MAX_ITERATIONS {
        let mut next = vec![vec![0.0; size]; size];
        for (j, h) in hits.iter().enumerate() {
            for (m, &count) in h.iter().enumerate() {
                if count == 0.0 {
                    continue;
                }
                let p: f64 = (0..size).map(|t| k[m][t] * basis[(j, t)]).sum();
                if p <= 0.0 {
                    continue;
                }
                for t in 0..size {
                    next[m][t] += count * k[m][t] * basis[(j, t)] / p;
                }
            }
        }
        let mut change = 0.0f64;
        for t in 0..size {
            let column: f64 = next.iter().map(|row| row[t]).sum();
            for m in 0..size {
                let v = if column > 0.0 { next[m][t] / column } else { k[m][t] };
                change = change.max((v - k[m][t]).abs());
                next[m][t] = v;
            }
        }
        k = next;
        if change < CONVERGED {
            break;
        }
    }
    k
}

/// Retrodictive weights `W(N'|N)` over true pairs for every reported pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrodictiveWeights {
    n_max: u32,
    /// `table[measured][true]`, both indexed `n_c·(n_max+1) + n_d`
    table: Vec<Vec<f64>>,
    fallback: Vec<bool>,
}

impl RetrodictiveWeights {
    pub fn new(n_max: u32, table: Vec<Vec<f64>>) -> Result<Self> {
        let size = (n_max as usize + 1).pow(2);
        if table.len() != size || table.iter().any(|r| r.len() != size) {
            return Err(Error::InvalidModel(format!("weight table must be {size}×{size}")));
        }
        for (i, row) in table.iter().enumerate() {
            if row.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
                return Err(Error::InvalidModel(format!("negative or non-finite weight in row {i}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::InvalidModel(format!("weights for row {i} sum to {sum}")));
            }
        }
        Ok(Self { n_max, table, fallback: vec![false; size] })
    }

    pub fn identity(n_max: u32) -> Self {
        let size = (n_max as usize + 1).pow(2);
        let table = (0..size)
            .map(|i| (0..size).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { n_max, table, fallback: vec![false; size] }
    }

    /// Exact Bayes retrodiction of a forward channel: `W(N'|N) ∝
    /// K_c[N_c|N'_c] K_d[N_d|N'_d] P̄(N')`, with `P̄` the count distribution
    /// averaged over a flat phase prior on `grid`.
    pub fn from_confusion(confusion: &ConfusionModel, ideal: &InterferometerModel, grid: &PhaseGrid) -> Self {
        let n_max = confusion.n_max;
        let side = n_max as usize + 1;
        let size = side * side;
        let prior = phase_averaged_counts(ideal, n_max, grid);
        let table = (0..size)
            .map(|measured| {
                let (mc, md) = (measured / side, measured % side);
                let mut row: Vec<f64> = (0..size)
                    .map(|truth| {
                        let (tc, td) = (truth / side, truth % side);
                        confusion.forward_c[mc][tc] * confusion.forward_d[md][td] * prior[truth]
                    })
                    .collect();
                let total: f64 = row.iter().sum();
                if total > 0.0 {
                    row.iter_mut().for_each(|w| *w /= total);
                } else {
                    row.iter_mut().for_each(|w| *w = 1.0 / size as f64);
                }
                row
            })
            .collect();
        Self { n_max, table, fallback: vec![false; size] }
    }

    pub fn n_max(&self) -> u32 {
        self.n_max
    }

    fn side(&self) -> usize {
        self.n_max as usize + 1
    }

    fn index(&self, o: Outcome) -> usize {
        o.n_c.min(self.n_max) as usize * self.side() + o.n_d.min(self.n_max) as usize
    }

    fn outcome(&self, index: usize) -> Outcome {
        Outcome::new((index / self.side()) as u32, (index % self.side()) as u32)
    }

    pub fn weight(&self, measured: Outcome, truth: Outcome) -> f64 {
        if truth.n_c > self.n_max || truth.n_d > self.n_max {
            return 0.0;
        }
        self.table[self.index(measured)][self.index(truth)]
    }

    /// `W(N|N)`.
    pub fn diagonal(&self, measured: Outcome) -> f64 {
        self.weight(measured, measured)
    }

    /// Distribution over true pairs for one reported pair.
    pub fn row(&self, measured: Outcome) -> impl Iterator<Item = (Outcome, f64)> + '_ {
        self.table[self.index(measured)].iter().enumerate().map(|(i, &w)| (self.outcome(i), w))
    }

    pub fn measured_pairs(&self) -> impl Iterator<Item = Outcome> + '_ {
        (0..self.table.len()).map(|i| self.outcome(i))
    }

    /// True when the pair was never observed during calibration and got
    /// uniform weights.
    pub fn is_fallback(&self, measured: Outcome) -> bool {
        self.fallback[self.index(measured)]
    }

    /// Smallest diagonal weight among pairs backed by calibration data.
    pub fn worst_diagonal(&self) -> (Outcome, f64) {
        self.measured_pairs()
            .filter(|&o| !self.is_fallback(o))
            .map(|o| (o, self.diagonal(o)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((Outcome::new(0, 0), f64::NAN))
    }

    fn mark_fallback(&mut self, measured: Outcome) {
        let i = self.index(measured);
        let size = self.table.len();
        self.table[i] = vec![1.0 / size as f64; size];
        self.fallback[i] = true;
    }

    /// Mixture density `Σ_{N'} W(N'|N) P(φ|N')` at every grid node.
    fn mixture_density(&self, measured: Outcome, grid: &PhaseGrid) -> Vec<f64> {
        let mut density = vec![0.0; grid.len()];
        for (truth, w) in self.row(measured) {
            if w == 0.0 {
                continue;
            }
            let ln_c = ln_normalization_constant(truth);
            let (a, b) = (f64::from(truth.n_c), f64::from(truth.n_d));
            for ((d, &lc), &ls) in density.iter_mut().zip(grid.ln_cos2()).zip(grid.ln_sin2()) {
                let mut l = ln_c;
                if truth.n_c > 0 {
                    l += a * lc;
                }
                if truth.n_d > 0 {
                    l += b * ls;
                }
                *d += w * l.exp();
            }
        }
        density
    }

    /// Precomputes `ln P_fit(φ|N)` for every reported pair on `grid`.
    pub fn shot_model(&self, grid: &PhaseGrid) -> FittedShots {
        let log_tables = self
            .measured_pairs()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&o| self.mixture_density(o, grid).into_iter().map(f64::ln).collect())
            .collect();
        FittedShots { n_max: self.n_max, grid_len: grid.len(), log_tables }
    }
}

/// `P̄(N') = (1/π) ∫ P(N'|φ) dφ` for folded true pairs.
fn phase_averaged_counts(ideal: &InterferometerModel, n_max: u32, grid: &PhaseGrid) -> Vec<f64> {
    let side = n_max as usize + 1;
    let mut per_node = vec![vec![0.0; grid.len()]; side * side];
    for (k, &phi) in grid.nodes().iter().enumerate() {
        let (mu_c, mu_d) = ideal.means_unchecked(phi);
        let q_c = folded_poisson(mu_c, n_max);
        let q_d = folded_poisson(mu_d, n_max);
        for a in 0..side {
            for b in 0..side {
                per_node[a * side + b][k] = q_c[a] * q_d[b];
            }
        }
    }
    per_node.iter().map(|values| grid.integrate(values) / PI).collect()
}

/// Noisy single-pulse posteriors tabulated on a grid.
#[derive(Debug, Clone)]
pub struct FittedShots {
    n_max: u32,
    grid_len: usize,
    log_tables: Vec<Vec<f64>>,
}

impl ShotModel for FittedShots {
    fn add_log_density(&self, outcome: Outcome, multiplicity: f64, grid: &PhaseGrid, acc: &mut [f64]) {
        assert_eq!(grid.len(), self.grid_len, "table was built for a different grid");
        let side = self.n_max as usize + 1;
        let i = outcome.n_c.min(self.n_max) as usize * side + outcome.n_d.min(self.n_max) as usize;
        for (slot, &l) in acc.iter_mut().zip(&self.log_tables[i]) {
            *slot += multiplicity * l;
        }
    }
}

/// Fits retrodictive weights to calibration data.
///
/// Reported pairs that never occurred during calibration get uniform
/// weights over all true pairs.
pub fn fit_retrodictive_weights(calib: &CalibrationData, grid: &PhaseGrid) -> Result<RetrodictiveWeights> {
    let confusion = fit_confusion(calib)?;
    let ideal = InterferometerModel::new(calib.nbar)?;
    let mut weights = RetrodictiveWeights::from_confusion(&confusion, &ideal, grid);
    let unseen: Vec<Outcome> = weights.measured_pairs().filter(|&o| calib.total_count(o) == 0).collect();
    for o in unseen {
        log::warn!("pair ({}, {}) never observed during calibration; using uniform weights", o.n_c, o.n_d);
        weights.mark_fallback(o);
    }
    Ok(weights)
}

/// Root-mean-square deviation between the empirical calibration posteriors
/// and the fitted mixtures, over every observed pair and calibration phase.
pub fn posterior_residual(calib: &CalibrationData, weights: &RetrodictiveWeights) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for o in weights.measured_pairs() {
        let Some(empirical) = calib.empirical_posterior(o) else { continue };
        for (j, &phi) in calib.phases.iter().enumerate() {
            let model = posterior_fit_at(o, weights, phi);
            sum += (empirical[j] - model).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

fn posterior_fit_at(measured: Outcome, weights: &RetrodictiveWeights, phi: f64) -> f64 {
    let (c2, s2) = ((0.5 * phi).cos().powi(2), (0.5 * phi).sin().powi(2));
    weights
        .row(measured)
        .filter(|&(_, w)| w > 0.0)
        .map(|(t, w)| {
            w * ln_normalization_constant(t).exp() * c2.powi(t.n_c as i32) * s2.powi(t.n_d as i32)
        })
        .sum()
}

/// Noisy single-pulse posterior `P_fit(φ | measured)`.
pub fn posterior_fit(measured: Outcome, weights: &RetrodictiveWeights, grid: &PhaseGrid) -> Result<Posterior> {
    let density = weights.mixture_density(measured, grid);
    Posterior::from_log_density(grid, density.into_iter().map(f64::ln).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::single_shot_posterior;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ideal() -> InterferometerModel {
        InterferometerModel::new(1.08).unwrap()
    }

    fn coarse_grid() -> PhaseGrid {
        PhaseGrid::new(1025).unwrap()
    }

    fn nineteen_phases() -> Vec<f64> {
        (1..=19).map(|i| f64::from(i) * 0.05 * PI).collect()
    }

    #[test]
    fn confusion_validation() {
        assert!(ConfusionModel::symmetric(1, vec![vec![0.9, 0.1], vec![0.1, 0.8]]).is_err());
        assert!(ConfusionModel::symmetric(1, vec![vec![1.2, 0.0], vec![-0.2, 1.0]]).is_err());
        assert!(ConfusionModel::symmetric(2, vec![vec![1.0, 0.0], vec![0.0, 1.0]]).is_err());
        assert!(ConfusionModel::symmetric(1, vec![vec![0.9, 0.1], vec![0.1, 0.9]]).is_ok());
        assert!(ConfusionModel::from_misread_rates(2, &[0.1, 0.0, 0.0], &[0.0; 3]).is_err());
        let reference = ConfusionModel::reference_regime();
        for k in [reference.forward_c(), reference.forward_d()] {
            for t in 0..5 {
                let s: f64 = k.iter().map(|r| r[t]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(ConfusionModel::identity(4).is_identity());
        assert!(!reference.is_identity());
    }

    #[test]
    fn confusion_json_is_validated() {
        let k = ConfusionModel::reference_regime();
        let text = serde_json::to_string(&k).unwrap();
        assert!(text.starts_with("{\"n_max\":4,\"forward_c\":[["));
        assert_eq!(serde_json::from_str::<ConfusionModel>(&text).unwrap(), k);
        let bad = r#"{"n_max":1,"forward_c":[[0.5,0],[0.4,1]],"forward_d":[[1,0],[0,1]]}"#;
        assert!(serde_json::from_str::<ConfusionModel>(bad).is_err());
    }

    #[test]
    fn identity_channel_is_transparent() {
        let k = ConfusionModel::identity(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for a in 0..=4 {
            for b in 0..=4 {
                let o = Outcome::new(a, b);
                assert_eq!(k.apply_noise(o, &mut rng), o);
            }
        }
        // counts above n_max are folded
        assert_eq!(k.apply_noise(Outcome::new(7, 2), &mut rng), Outcome::new(4, 2));
    }

    #[test]
    fn dead_detectors_report_nothing() {
        let k = ConfusionModel::dead(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for a in 0..6 {
            assert_eq!(k.apply_noise(Outcome::new(a, 5 - a), &mut rng), Outcome::new(0, 0));
        }
        for i in 0..=8 {
            let phi = PI * f64::from(i) / 8.0;
            let p = noisy_joint_likelihood(phi, Outcome::new(0, 0), &k, &ideal()).unwrap();
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn misread_fraction_matches_the_channel() {
        let k = ConfusionModel::symmetric(1, vec![vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 100_000;
        let flips = (0..trials)
            .filter(|i| {
                let t = (i % 2) as u32;
                k.apply_noise(Outcome::new(t, 0), &mut rng).n_c != t
            })
            .count();
        let sigma = (0.1 * 0.9 / trials as f64).sqrt();
        let freq = flips as f64 / trials as f64;
        assert!((freq - 0.1).abs() < 5.0 * sigma, "{freq}");
    }

    #[test]
    fn identity_channel_reproduces_the_ideal_likelihood() {
        let k = ConfusionModel::identity(25);
        let m = ideal();
        for i in 0..=10 {
            let phi = PI * f64::from(i) / 10.0;
            for a in 0..5 {
                for b in 0..5 {
                    let o = Outcome::new(a, b);
                    let noisy = noisy_joint_likelihood(phi, o, &k, &m).unwrap();
                    let clean = m.likelihood(phi, o).unwrap();
                    assert!((noisy - clean).abs() <= 1e-13 * clean, "{phi} {o:?}");
                }
            }
        }
    }

    #[test]
    fn noisy_likelihood_matches_brute_force_double_sum() {
        let k = ConfusionModel::new(
            4,
            ConfusionModel::reference_regime().forward_c().to_vec(),
            ConfusionModel::from_misread_rates(4, &[0.0, 0.3, 0.1, 0.2, 0.05], &[0.02, 0.05, 0.0, 0.1, 0.0])
                .unwrap()
                .forward_d()
                .to_vec(),
        )
        .unwrap();
        let m = ideal();
        let phi = PI / 2.0;
        let mut total = 0.0;
        for mc in 0..=4u32 {
            for md in 0..=4u32 {
                // independent oracle: explicit sum over true pairs, with the
                // tail above n_max folded by brute-force summation to 60
                let mut expected = 0.0;
                for tc in 0..60u32 {
                    for td in 0..60u32 {
                        let p = m.likelihood(phi, Outcome::new(tc, td)).unwrap();
                        expected += k.forward_c()[mc as usize][tc.min(4) as usize]
                            * k.forward_d()[md as usize][td.min(4) as usize]
                            * p;
                    }
                }
                let got = noisy_joint_likelihood(phi, Outcome::new(mc, md), &k, &m).unwrap();
                assert!((got - expected).abs() < 1e-12, "({mc},{md}) {got} {expected}");
                total += got;
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
        assert!(noisy_joint_likelihood(-1.0, Outcome::new(0, 0), &k, &m).is_err());
    }

    #[test]
    fn calibration_requires_pulses() {
        let err = simulate_calibration(&[0.5], 0, &ConfusionModel::identity(4), &ideal(), 1).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        assert!(simulate_calibration(&[4.0], 10, &ConfusionModel::identity(4), &ideal(), 1).is_err());
    }

    #[test]
    fn calibration_is_reproducible() {
        let k = ConfusionModel::reference_regime();
        let a = simulate_calibration(&nineteen_phases(), 2000, &k, &ideal(), 9).unwrap();
        let b = simulate_calibration(&nineteen_phases(), 2000, &k, &ideal(), 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pulses(3), 2000);
    }

    #[test]
    fn too_few_phases_are_rank_deficient() {
        let calib = simulate_calibration(&[0.3, 1.0, 2.0], 1000, &ConfusionModel::identity(4), &ideal(), 4).unwrap();
        let err = fit_retrodictive_weights(&calib, &coarse_grid()).unwrap_err();
        assert!(matches!(err, Error::RankDeficient(_)));
    }

    #[test]
    fn noiseless_calibration_fits_identity_weights() {
        let g = coarse_grid();
        let calib = simulate_calibration(&nineteen_phases(), 200_000, &ConfusionModel::identity(4), &ideal(), 17).unwrap();
        let w = fit_retrodictive_weights(&calib, &g).unwrap();
        for o in w.measured_pairs() {
            if !w.is_fallback(o) {
                if o.total() <= 2 {
                    assert!(w.diagonal(o) >= 0.99, "{o:?} {}", w.diagonal(o));
                }
                // sparsely populated high-count pairs are limited by the
                // calibration statistics
                assert!(w.diagonal(o) >= 0.85, "{o:?} {}", w.diagonal(o));
            }
        }
    }

    #[test]
    fn round_trip_recovers_generating_weights() {
        let g = coarse_grid();
        let k = ConfusionModel::reference_regime();
        let truth = RetrodictiveWeights::from_confusion(&k, &ideal(), &g);
        let calib = simulate_calibration(&nineteen_phases(), 200_000, &k, &ideal(), 23).unwrap();
        let fitted = fit_retrodictive_weights(&calib, &g).unwrap();
        for o in fitted.measured_pairs() {
            let err = fitted
                .row(o)
                .zip(truth.row(o))
                .map(|((_, a), (_, b))| (a - b).abs())
                .fold(0.0, f64::max);
            // pairs with more than four photons are seen a few hundred times
            // at most and carry proportionally more scatter
            let tolerance = if o.total() <= 4 { 0.02 } else { 0.05 };
            assert!(err < tolerance, "{o:?} {err}");
        }
    }

    #[test]
    fn unseen_pairs_fall_back_to_uniform() {
        let calib = simulate_calibration(&nineteen_phases(), 500, &ConfusionModel::identity(4), &ideal(), 5).unwrap();
        let w = fit_retrodictive_weights(&calib, &coarse_grid()).unwrap();
        assert!(w.is_fallback(Outcome::new(4, 4)));
        assert!((w.diagonal(Outcome::new(4, 4)) - 1.0 / 25.0).abs() < 1e-15);
        assert!(!w.is_fallback(Outcome::new(0, 0)));
    }

    #[test]
    fn empirical_posterior_matches_the_ideal_curve() {
        // χ² test of the (0,1) counts against the shape sin²(φ/2), with the
        // overall scale fixed by the data
        let phases: Vec<f64> = (1..40).map(|i| f64::from(i) * PI / 40.0).collect();
        let calib = simulate_calibration(&phases, 200_000, &ConfusionModel::identity(4), &ideal(), 8).unwrap();
        let o = Outcome::new(0, 1);
        let shape: Vec<f64> = phases.iter().map(|p| (p / 2.0).sin().powi(2)).collect();
        let counts: Vec<f64> = (0..phases.len()).map(|j| calib.count(j, o) as f64).collect();
        let scale = counts.iter().sum::<f64>() / shape.iter().sum::<f64>();
        let chi2: f64 = counts.iter().zip(&shape).map(|(c, s)| (c - scale * s).powi(2) / (scale * s)).sum();
        // 38 degrees of freedom; 0.999 quantile is 70.7. The true scale also
        // carries e^{-μ_c}, so the comparison uses the likelihood instead.
        let expected: Vec<f64> = phases
            .iter()
            .map(|&p| 200_000.0 * ideal().likelihood(p, o).unwrap())
            .collect();
        let chi2_exact: f64 = counts.iter().zip(&expected).map(|(c, e)| (c - e).powi(2) / e).sum();
        assert!(chi2_exact < 72.9, "{chi2_exact}"); // 39 dof, 0.999 quantile
        assert!(chi2.is_finite());
        let post = calib.empirical_posterior(o).unwrap();
        assert_eq!(post.len(), phases.len());
    }

    #[test]
    fn retrodiction_rows_are_distributions() {
        let w = RetrodictiveWeights::from_confusion(&ConfusionModel::reference_regime(), &ideal(), &coarse_grid());
        for o in w.measured_pairs() {
            let s: f64 = w.row(o).map(|(_, v)| v).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(w.row(o).all(|(_, v)| v >= 0.0));
        }
        let id = RetrodictiveWeights::from_confusion(&ConfusionModel::identity(4), &ideal(), &coarse_grid());
        assert_eq!(id, RetrodictiveWeights::identity(4));
    }

    #[test]
    fn reference_regime_diagonals() {
        let w = RetrodictiveWeights::from_confusion(&ConfusionModel::reference_regime(), &ideal(), &PhaseGrid::default());
        let targets = [((0, 0), 0.54), ((0, 1), 0.67), ((1, 1), 0.67), ((0, 2), 0.87)];
        for ((a, b), target) in targets {
            let d = w.diagonal(Outcome::new(a, b));
            assert!((d - target).abs() < 0.05, "({a},{b}) {d}");
        }
        let (worst, value) = w.worst_diagonal();
        assert_eq!(worst, Outcome::new(0, 0));
        assert!((value - 0.54).abs() < 0.05);
    }

    #[test]
    fn weight_table_validation() {
        assert!(RetrodictiveWeights::new(0, vec![vec![1.0]]).is_ok());
        assert!(RetrodictiveWeights::new(0, vec![vec![0.5]]).is_err());
        assert!(RetrodictiveWeights::new(1, vec![vec![1.0, 0.0, 0.0, 0.0]; 3]).is_err());
        let mut rows = vec![vec![0.25; 4]; 4];
        rows[2] = vec![1.5, -0.5, 0.0, 0.0];
        assert!(RetrodictiveWeights::new(1, rows).is_err());
    }

    #[test]
    fn mixture_posterior_limits() {
        let g = coarse_grid();
        let id = RetrodictiveWeights::identity(4);
        let noisy = posterior_fit(Outcome::new(0, 2), &id, &g).unwrap();
        let clean = single_shot_posterior(Outcome::new(0, 2), &g);
        for (a, b) in noisy.density().iter().zip(clean.density()) {
            assert!((a - b).abs() < 1e-12);
        }

        // half (1,0), half (0,1) for the measured pair (0,0)
        let mut table = RetrodictiveWeights::identity(1).table;
        table[0] = vec![0.0, 0.5, 0.5, 0.0];
        let w = RetrodictiveWeights::new(1, table).unwrap();
        let post = posterior_fit(Outcome::new(0, 0), &w, &g).unwrap();
        assert!((post.mean() - PI / 2.0).abs() < 1e-12);
        assert!(post.density().iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn reference_regime_flattens_the_zero_count_posterior() {
        let g = coarse_grid();
        let w = RetrodictiveWeights::from_confusion(&ConfusionModel::reference_regime(), &ideal(), &g);
        // (0,1) is informative in the ideal case and gets diluted by misreads
        let ideal_post = single_shot_posterior(Outcome::new(0, 1), &g);
        let noisy_post = posterior_fit(Outcome::new(0, 1), &w, &g).unwrap();
        assert!(noisy_post.variance() > ideal_post.variance());
        // (0,0) is flat ideally; misread photons make it informative, with a
        // dip at the balanced point
        let zero = posterior_fit(Outcome::new(0, 0), &w, &g).unwrap();
        assert!(zero.density().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn fitted_shots_agree_with_direct_mixture() {
        let g = coarse_grid();
        let w = RetrodictiveWeights::from_confusion(&ConfusionModel::reference_regime(), &ideal(), &g);
        let shots = w.shot_model(&g);
        let o = Outcome::new(2, 1);
        let mut acc = vec![0.0; g.len()];
        shots.add_log_density(o, 1.0, &g, &mut acc);
        let post = Posterior::from_log_density(&g, acc).unwrap();
        let direct = posterior_fit(o, &w, &g).unwrap();
        for (a, b) in post.density().iter().zip(direct.density()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
