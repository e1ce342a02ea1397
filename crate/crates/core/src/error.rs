use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("empty measure: total mass is zero")]
    EmptyMeasure,

    #[error("mass mismatch: {lhs} vs {rhs}")]
    MassMismatch { lhs: f64, rhs: f64 },

    #[error("no convergence after {iterations} iterations (last residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
        last: Vec<f64>,
    },

    #[error("singular preconditioner: {0}")]
    SingularPreconditioner(String),

    #[error("singular linearisation: condition number {cond:.3e}")]
    SingularX { cond: f64 },

    #[error("degenerate state: zero density, zero velocity and no viscosity, and no time-step cap")]
    DegenerateState,

    #[error("time step {dt:.3e} exceeds the stability limit {limit:.3e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("negativity breach at t = {t:.6e}: clipped mass {clipped:.3e} of {total:.3e}")]
    NegativityBreach { t: f64, clipped: f64, total: f64 },

    #[error("a-priori bound breached at t = {t:.6e}: max {value:.6e} > bound {bound:.6e}")]
    BoundBreach { t: f64, value: f64, bound: f64 },

    #[error("inadmissible data: {0}")]
    Admissibility(String),

    #[error("certificate breach at t = {t:.6e}: {monitor} = {value:.6e} exceeds {limit:.6e}")]
    CertificateBreach {
        t: f64,
        monitor: &'static str,
        value: f64,
        limit: f64,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: String, reason: String },
}

impl Error {
    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
