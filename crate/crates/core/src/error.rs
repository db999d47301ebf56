use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("mass mismatch: {left} vs {right} (tolerance {tol:e})")]
    MassMismatch { left: f64, right: f64, tol: f64 },

    #[error("field has zero mass")]
    ZeroMass,

    #[error("source does not integrate to zero (integral {0:e})")]
    NonzeroSourceIntegral(f64),

    #[error("time step {dt} violates the CFL bound; admissible dt <= {max_dt}")]
    Cfl { dt: f64, max_dt: f64 },

    #[error("kernel symbol vanishes on Fourier mode {mode} where the required velocity has amplitude {amplitude:e}")]
    InfeasibleDeconvolution { mode: usize, amplitude: f64 },

    #[error("communication graph is not strongly connected")]
    DisconnectedGraph,

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("sinkhorn did not converge after {iterations} iterations (marginal violation {violation:e})")]
    NotConverged {
        iterations: usize,
        violation: f64,
        plan: Box<crate::transport::TransportPlan>,
    },

    #[error("no herder count up to {m_max} reached the success threshold")]
    NotHerdable { m_max: usize },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("run diverged at t = {t}: {reason}")]
    Divergence { t: f64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
