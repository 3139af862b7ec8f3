use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid parameter: {0}")]
    Domain(String),

    #[error("contact system is singular (reciprocal condition {rcond:.3e})")]
    Singular { rcond: f64 },

    #[error("decoupling matrix is singular (condition estimate {cond:.3e})")]
    RelativeDegree { cond: f64 },

    #[error("state is not on the impact surface: {0}")]
    Precondition(String),

    #[error("integration diverged at t = {t:.4} s")]
    Divergence { t: f64 },

    #[error("gait synthesis infeasible: {0}")]
    SynthesisInfeasible(String),

    #[error("search did not converge (best residual {residual:.3e})")]
    NonConvergence { residual: f64 },

    #[error("rollout left the Poincare section: {0}")]
    SectionEscape(String),

    #[error("training infeasible: {0}")]
    TrainingInfeasible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
