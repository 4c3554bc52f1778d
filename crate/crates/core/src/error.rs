use thiserror::Error;

/// Errors raised by the library.
///
/// Scientific outcomes (instability, missing equilibria, failed checks) are
/// reported in result types, never through this enum.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown node id `{0}`")]
    UnknownNode(String),
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("unknown commodity id `{0}`")]
    UnknownCommodity(String),
    #[error("duplicate commodity id `{0}`")]
    DuplicateCommodity(String),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("policy `{family}` not applicable: {reason}")]
    PolicyNotApplicable { family: String, reason: String },
    #[error("state rejected: {0}")]
    InfeasibleState(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("capacity feasibility violated at node `{node}` (commodity `{commodity}`): inflow bound {inflow} exceeds outflow capacity {outflow}")]
    CapacityInfeasible {
        node: String,
        commodity: String,
        inflow: f64,
        outflow: f64,
    },
    #[error("box construction infeasible at node `{node}`: required upper bound {required} exceeds {limit}")]
    BoxInfeasible {
        node: String,
        required: f64,
        limit: f64,
    },
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("Perron assumptions violated: {0}")]
    PerronAssumptions(String),
    #[error("eigenvalue iteration failed: {0}")]
    Eigen(String),
    #[error("interval does not bracket transition: {0}")]
    NoBracket(String),
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("trajectory too short: {0}")]
    TrajectoryTooShort(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
