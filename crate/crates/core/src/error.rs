use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("gravity direction must be a unit vector (norm = {norm})")]
    NonUnitGravity { norm: f64 },

    #[error("ill-conditioned {what} (condition number {cond:e})")]
    IllConditioned { what: &'static str, cond: f64 },

    #[error("Euler-rate singularity: |cos theta| = {cos_theta:e}")]
    EulerSingularity { cos_theta: f64 },

    #[error("free-fall singularity: thrust {thrust:e} N below guard {min:e} N")]
    FreeFallSingularity { thrust: f64, min: f64 },

    #[error("asin argument {0} outside [-1, 1]")]
    Domain(f64),

    #[error("attitude singularity: phi = {phi}, theta = {theta}")]
    AttitudeSingularity { phi: f64, theta: f64 },

    #[error("singular decoupling matrix (condition number {cond:e})")]
    SingularDecoupling { cond: f64 },

    #[error("Riccati equation has no stabilizing solution: {0}")]
    NoStabilizingSolution(String),

    #[error("non-finite value in integrated state at t = {t}")]
    NonFinite { t: f64 },

    #[error("time {t} outside reference range [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for the flatness / Euler-angle guards that a closed-loop rollout treats as a trip.
    pub fn is_singularity(&self) -> bool {
        matches!(
            self,
            Error::EulerSingularity { .. }
                | Error::FreeFallSingularity { .. }
                | Error::Domain(_)
                | Error::AttitudeSingularity { .. }
                | Error::SingularDecoupling { .. }
        )
    }
}
