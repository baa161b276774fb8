use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("parameter shape mismatch for subsystem {owner}: expected {expected} entries, got {got}")]
    ParameterShape {
        owner: usize,
        expected: usize,
        got: usize,
    },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("polytope is empty")]
    EmptyPolytope,

    #[error("polytope is unbounded")]
    UnboundedPolytope,

    #[error("consistent parameter set of subsystem {owner} became empty at t={t} (assumed disturbance bound too small)")]
    Inconsistency { owner: usize, t: usize },

    #[error("every candidate parameter set is inconsistent with the observations")]
    GlobalInconsistency,

    #[error("column synthesis infeasible for global state index {column}: constraint residual {residual:.3e} on rows {rows:?}")]
    SynthesisInfeasible {
        column: usize,
        residual: f64,
        rows: Vec<usize>,
    },

    #[error("system is not controllable within the horizon (minimum grammian singular value is zero)")]
    NotControllable,

    #[error("causality violation: subsystem {reader} read stamp {stamp} from subsystem {source_id} at t={now}")]
    CausalityViolation {
        reader: usize,
        source_id: usize,
        stamp: usize,
        now: usize,
    },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("system identification failed after {steps} excitation steps")]
    IdentificationFailed { steps: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
