use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("quadrature did not converge: requested relative tolerance {requested:e}, estimated error {estimated:e}")]
    Tolerance { requested: f64, estimated: f64 },

    #[error("covariance density is singular on the diagonal x1 = x2 in dimension {0}")]
    Singular(usize),

    #[error("particle cap exceeded: {count} particles > max_particles = {cap}")]
    ParticleCap { count: usize, cap: usize },

    #[error(
        "rejection budget of {budget} trials exhausted with {accepted} accepted \
         (observed survival frequency {frequency:e})"
    )]
    RejectionBudget {
        budget: u64,
        accepted: u64,
        frequency: f64,
    },

    #[error("design error: {0}")]
    Design(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

impl Error {
    /// True for errors caused by a simulation exhausting its resource limits.
    pub fn is_resource(&self) -> bool {
        matches!(self, Error::ParticleCap { .. } | Error::RejectionBudget { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
