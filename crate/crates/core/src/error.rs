use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("triad coupling must satisfy B1 + B2 + B3 = 0 (got sum {sum})")]
    TriadConstraint { sum: f64 },

    #[error("energy control requires uniform damping D = -dI")]
    NonUniformDamping,

    #[error("ensemble blew up: sample {sample} became non-finite at t = {time}")]
    BlowUp { sample: usize, time: f64 },

    #[error(
        "equilibrium covariance is numerically singular (condition number {condition:e}); \
         sample a longer trajectory"
    )]
    SingularCovariance { condition: f64 },

    #[error("time grid mismatch: {0}")]
    GridMismatch(String),

    #[error("t = {t} lies outside the available support [0, {end}]")]
    OutOfSupport { t: f64, end: f64 },

    #[error("singular inversion in mode {mode} at t = {time}: denominator {denominator:e}")]
    SingularInversion {
        mode: usize,
        time: f64,
        denominator: f64,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
