use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate element {element}: measure {measure:e}")]
    DegenerateElement { element: usize, measure: f64 },

    #[error("control undefined at node {node}: lambda = {lambda} >= p = {price}")]
    ControlUndefined { node: usize, lambda: f64, price: f64 },

    #[error("domain error at node {node}: {what}")]
    Domain { node: usize, what: String },

    #[error("newton did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("singular jacobian: {0}")]
    SingularJacobian(String),

    #[error("continuation step size underflow at parameter {param}")]
    StepUnderflow { param: f64 },

    #[error("branch switch failed: {0}")]
    SwitchFailed(String),

    #[error("target has defect {defect}; the connecting orbit problem is ill-posed")]
    DefectiveTarget { defect: usize },

    #[error("marginal eigenvalue {re:e}{im:+e}i: defect ill-defined")]
    MarginalSpectrum { re: f64, im: f64 },

    #[error("no path: initial state continuation stalled at sigma = {sigma}")]
    PathNonexistence { sigma: f64 },

    #[error("no indifference point: J difference has no sign change in [{lo}, {hi}]")]
    NoSkiba { lo: f64, hi: f64 },

    #[error("time stepping blow-up at t = {t}")]
    BlowUp { t: f64 },

    #[error("eigensolver failed: {0}")]
    Eigen(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
