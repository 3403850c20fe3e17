//! Bayesian phase estimation for a Mach-Zehnder interferometer fed by a
//! coherent state and vacuum, read out by two photon-number-resolving
//! detectors.
//!
//! The crate is organised bottom-up:
//!
//! - [`photon_model`]: ideal Poisson count statistics at the two output ports.
//! - [`posterior`]: grid posteriors over the phase in `[0, π]`, held in log space.
//! - [`detector`]: misread channel, simulated calibration and retrodictive weights.
//! - [`estimators`]: classical, fringe-inverted, YMK and maximum-likelihood estimators.
//! - [`fisher`]: Fisher information and Cramér-Rao bounds.
//! - [`experiment`]: seeded Monte Carlo harness for bias and sensitivity scans.
//! - [`io`]: JSON and CSV formats shared with the command-line front end.

pub mod detector;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod fisher;
pub mod io;
mod lsq;
pub mod photon_model;
pub mod posterior;
pub mod quadrature;
mod seeding;

pub use detector::{CalibrationData, ConfusionModel, NoisyModel, RetrodictiveWeights};
pub use error::{Error, Result};
pub use estimators::{FringeParams, MlEstimate};
pub use experiment::{EstimatorKind, Experiment, ExperimentPlan, ScanRecord, ScanResult};
pub use photon_model::{InterferometerModel, Outcome, OutcomeSequence, PhaseLikelihood};
pub use posterior::{PhaseGrid, Posterior};

/// Confidence level used for every reported phase uncertainty.
pub const ONE_SIGMA_LEVEL: f64 = 0.6827;
