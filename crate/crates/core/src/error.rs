use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported geometry kind: {0}")]
    UnsupportedKind(String),

    #[error("resolution below minimum: {axis} has {got} nodes, need at least {min}")]
    ResolutionTooLow { axis: &'static str, got: usize, min: usize },

    #[error("non-positive size parameter {name} = {value}")]
    NonPositiveSize { name: &'static str, value: f64 },

    #[error("profile violates pole boundary conditions: {0}")]
    PoleCondition(String),

    #[error("time grid must be strictly increasing")]
    TimeGridNotIncreasing,

    #[error("time grid reaches extinction: t = {t} but the flow ends at t = {extinction}")]
    PastExtinction { t: f64, extinction: f64 },

    #[error("time {t} outside the flow interval [{lo}, {hi}]")]
    TimeOutsideInterval { t: f64, lo: f64, hi: f64 },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("time gap {tau} below the bootstrap floor {floor}")]
    BelowBootstrapFloor { tau: f64, floor: f64 },

    #[error("measures live on mismatched slices")]
    MismatchedSlices,

    #[error("pinching detected: min interior profile {min_psi} below threshold {threshold}")]
    PinchingDetected { min_psi: f64, threshold: f64 },

    #[error("forward step instability: max-norm grew from {before} to {after}")]
    StepInstability { before: f64, after: f64 },

    #[error("entropic transport failed to converge within {0} iterations")]
    SinkhornNonConvergence(usize),

    #[error("check {id} does not apply to flow class {class}")]
    InapplicableCheck { id: String, class: String },

    #[error("unknown check id: {0}")]
    UnknownCheck(String),

    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
