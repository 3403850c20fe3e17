//! Run configuration: one JSON document with `model`, `noise`, `plan` and
//! `output` sections. Phases are given in units of π; relative file paths
//! are resolved against the directory holding the configuration file.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use mzphase::detector::{fit_confusion, DEFAULT_DETECTOR_N_MAX};
use mzphase::experiment::default_theta_grid;
use mzphase::fisher::DEFAULT_D_THETA;
use mzphase::io::{read_pulse_csv, weights_from_json};
use mzphase::{
    CalibrationData, ConfusionModel, EstimatorKind, ExperimentPlan, InterferometerModel, RetrodictiveWeights,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub noise: Option<NoiseSection>,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub nbar: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { nbar: 1.08 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Detectors that never misread.
    Ideal,
    /// The reference misread regime.
    Reference,
}

/// The misread channel is given by at most one of `preset`, explicit
/// `forward_c`/`forward_d` matrices, or a `file` holding a confusion model.
/// Recorded `calibration` runs and a precomputed `weights` table are
/// optional; without any channel the one fitted to the recorded runs is used
/// for simulation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub preset: Option<Preset>,
    pub n_max: Option<u32>,
    pub forward_c: Option<Vec<Vec<f64>>>,
    pub forward_d: Option<Vec<Vec<f64>>>,
    pub file: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub calibration: Option<Vec<RecordedRun>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordedRun {
    /// Known phase of the run, in units of π.
    pub theta: f64,
    /// `pulse_index,nc,nd` CSV.
    pub file: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub theta: Vec<f64>,
    pub shots: u64,
    pub replicas: u32,
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    pub level: f64,
    pub grid_points: usize,
    pub calibration_phases: Vec<f64>,
    pub calibration_pulses: u64,
    pub d_theta: f64,
    pub posterior_theta: f64,
    pub checkpoints: Vec<u64>,
}

impl Default for PlanSection {
    fn default() -> Self {
        let plan = ExperimentPlan::default();
        let in_pi = |v: &[f64]| v.iter().map(|t| t / PI).collect();
        Self {
            theta: in_pi(&plan.theta_grid),
            shots: plan.shots,
            replicas: plan.replicas,
            seed: plan.seed,
            estimators: plan.estimators,
            level: plan.level,
            grid_points: plan.grid_points,
            calibration_phases: in_pi(&default_theta_grid()),
            calibration_pulses: plan.calibration_pulses,
            d_theta: DEFAULT_D_THETA,
            posterior_theta: 0.24,
            checkpoints: vec![1, 10, 100, 1000],
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// Everything a command needs, with files loaded and phases in radians.
pub struct Setup {
    pub config: Config,
    pub model: InterferometerModel,
    pub plan: ExperimentPlan,
    pub recorded: Option<CalibrationData>,
    pub weights: Option<RetrodictiveWeights>,
    /// Channel used to fit weights during `calibrate`, when nothing is recorded.
    pub calibration_channel: ConfusionModel,
    pub d_theta: f64,
    pub posterior_theta: f64,
    pub checkpoints: Vec<u64>,
    pub out_dir: PathBuf,
}

fn config_error(context: impl std::fmt::Display) -> CliError {
    CliError::Config(context.to_string())
}

fn phases(values: &[f64], what: &str) -> Result<Vec<f64>, CliError> {
    values
        .iter()
        .map(|&t| {
            if (0.0..=1.0).contains(&t) {
                Ok(t * PI)
            } else {
                Err(config_error(format!("{what} {t} is outside [0, 1] (units of π)")))
            }
        })
        .collect()
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    /// Loads referenced files and checks every value; `base` is the
    /// directory relative paths are resolved against.
    pub fn resolve(self, base: &Path, out_dir: Option<PathBuf>) -> Result<Setup, CliError> {
        let model = InterferometerModel::new(self.model.nbar).map_err(config_error)?;
        let p = &self.plan;
        if !(p.d_theta.is_finite() && p.d_theta > 0.0) {
            return Err(config_error(format!("plan.d_theta must be positive, got {}", p.d_theta)));
        }
        let posterior_theta = phases(&[p.posterior_theta], "plan.posterior_theta")?[0];

        let (channel, recorded, weights) = match &self.noise {
            None => (None, None, None),
            Some(noise) => resolve_noise(noise, base, model.nbar())?,
        };
        let calibration_channel =
            channel.clone().unwrap_or_else(|| ConfusionModel::identity(DEFAULT_DETECTOR_N_MAX));

        let plan = ExperimentPlan {
            theta_grid: phases(&p.theta, "plan.theta")?,
            shots: p.shots,
            replicas: p.replicas,
            seed: p.seed,
            noise: channel,
            estimators: p.estimators.clone(),
            grid_points: p.grid_points,
            level: p.level,
            calibration_phases: phases(&p.calibration_phases, "plan.calibration_phases")?,
            calibration_pulses: p.calibration_pulses,
        };
        plan.validate().map_err(config_error)?;

        let out_dir = out_dir
            .or_else(|| self.output.dir.as_ref().map(|d| base.join(d)))
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Setup {
            d_theta: p.d_theta,
            posterior_theta,
            checkpoints: p.checkpoints.clone(),
            config: self,
            model,
            plan,
            recorded,
            weights,
            calibration_channel,
            out_dir,
        })
    }
}

type Noise = (Option<ConfusionModel>, Option<CalibrationData>, Option<RetrodictiveWeights>);

fn resolve_noise(noise: &NoiseSection, base: &Path, nbar: f64) -> Result<Noise, CliError> {
    let matrices = noise.forward_c.is_some() || noise.forward_d.is_some();
    let sources = usize::from(noise.preset.is_some()) + usize::from(matrices) + usize::from(noise.file.is_some());
    if sources > 1 {
        return Err(config_error("noise: give only one of preset, forward_c/forward_d, file"));
    }
    let mut channel = match (&noise.preset, &noise.file) {
        (Some(Preset::Reference), _) => Some(ConfusionModel::reference_regime()),
        (Some(Preset::Ideal), _) => Some(ConfusionModel::identity(noise.n_max.unwrap_or(DEFAULT_DETECTOR_N_MAX))),
        (None, Some(file)) => {
            let path = base.join(file);
            let text = fs::read_to_string(&path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
            Some(serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?)
        }
        (None, None) if matrices => {
            let (Some(c), Some(d)) = (&noise.forward_c, &noise.forward_d) else {
                return Err(config_error("noise: forward_c and forward_d must be given together"));
            };
            let n_max = noise.n_max.unwrap_or(c.len().saturating_sub(1) as u32);
            Some(ConfusionModel::new(n_max, c.clone(), d.clone()).map_err(config_error)?)
        }
        (None, None) => None,
    };
    if let (Some(k), Some(n_max)) = (&channel, noise.n_max) {
        if k.n_max() != n_max {
            return Err(config_error(format!("noise.n_max is {n_max} but the channel covers 0..={}", k.n_max())));
        }
    }

    let n_max = channel.as_ref().map(ConfusionModel::n_max).or(noise.n_max).unwrap_or(DEFAULT_DETECTOR_N_MAX);
    let recorded = match &noise.calibration {
        Some(runs) => {
            let mut loaded = Vec::with_capacity(runs.len());
            for run in runs {
                let theta = phases(&[run.theta], "noise.calibration theta")?[0];
                let path = base.join(&run.file);
                let file = fs::File::open(&path).map_err(|e| config_error(format!("cannot open {}: {e}", path.display())))?;
                let pulses = read_pulse_csv(file).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
                loaded.push((theta, pulses));
            }
            Some(CalibrationData::from_recorded(nbar, n_max, &loaded).map_err(config_error)?)
        }
        None => None,
    };
    let weights = match &noise.weights {
        Some(file) => {
            let path = base.join(file);
            let text = fs::read_to_string(&path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
            let w = weights_from_json(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            if w.n_max() != n_max {
                return Err(config_error(format!("weights in {} cover counts 0..={}, expected 0..={n_max}", path.display(), w.n_max())));
            }
            Some(w)
        }
        None => None,
    };
    if channel.is_none() {
        match &recorded {
            Some(data) => channel = Some(fit_confusion(data)?),
            None => {
                return Err(config_error(
                    "noise needs a channel (preset, forward_c/forward_d or file) or recorded calibration runs",
                ))
            }
        }
    }
    Ok((channel, recorded, weights))
}
