use thiserror::Error;

/// Errors raised by the library. Each variant corresponds to a validation or
/// numerical failure that callers are expected to handle (the CLI maps them to
/// exit codes).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("input is empty")]
    Empty,

    #[error("total mass is not zero (residual {residual:?}, tolerance {tolerance:e})")]
    NonzeroTotalMass { residual: Vec<f64>, tolerance: f64 },

    #[error("points {0} and {1} coincide")]
    DuplicatePoint(usize, usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("potential is not 1-Lipschitz within tolerance (constant {constant})")]
    NotLipschitz { constant: f64 },

    #[error("wrong dimension: {0}")]
    WrongDimension(String),

    #[error("weight vector {0} is zero")]
    ZeroVector(usize),

    #[error("weight vectors fail the kernel condition (rank {rank}, need {needed})")]
    RankDeficiency { rank: usize, needed: usize },

    #[error("invalid counterexample specification: {0}")]
    InvalidSpec(String),

    #[error("balls of radius {radius} around anchors {0} and {1} overlap", .pair.0, .pair.1)]
    BallOverlap { pair: (usize, usize), radius: f64 },

    #[error("center lies outside the grid box")]
    CenterOutsideBox,

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("needle density vanishes at interior sample {0}")]
    NonpositiveDensity(usize),

    #[error("needle has {0} usable samples, at least 5 are required")]
    TooFewPoints(usize),

    #[error("edge set does not connect the support ({components} components)")]
    DisconnectedEdgeSet { components: usize },

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("solver stopped after {iterations} iterations without converging (gap {gap:e})")]
    IterLimit { iterations: usize, gap: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
