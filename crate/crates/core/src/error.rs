use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("phase {0} rad is outside [0, π]")]
    PhaseDomain(f64),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("posterior vanishes at every grid node")]
    DegenerateEvidence,

    #[error("calibration basis is rank deficient: {0}")]
    RankDeficient(String),

    #[error("fit is under-determined: {0}")]
    Underdetermined(String),

    #[error("no fringe visible in calibration data (amplitude {0:e})")]
    NoFringe(f64),

    #[error("estimate undefined: {0}")]
    UndefinedEstimate(&'static str),

    #[error("uncertainty diverges at phase {0} rad")]
    Divergent(f64),

    #[error("central differences need θ ± dθ inside [0, π], got θ = {theta}, dθ = {step}")]
    Endpoint { theta: f64, step: f64 },

    #[error("Fisher information must be positive, got {0}")]
    NonPositiveFisher(f64),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical pipeline, as opposed to bad input
    /// or unreadable files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateEvidence
                | Error::RankDeficient(_)
                | Error::Underdetermined(_)
                | Error::NoFringe(_)
                | Error::UndefinedEstimate(_)
                | Error::Divergent(_)
                | Error::NonPositiveFisher(_)
        )
    }
}
