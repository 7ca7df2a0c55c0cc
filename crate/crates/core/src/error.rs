use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failures raised by the geometry pipeline.
///
/// Every variant maps to the subsystem that produced it through
/// [`Error::module`], so front ends can report provenance.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("point is not on the manifold (scaled residual {residual:.3e})")]
    NotOnManifold { point: Vec<f64>, residual: f64 },

    #[error("derivative is rank deficient (smallest singular value {sigma_min:.3e})")]
    RankDeficient { point: Vec<f64>, sigma_min: f64 },

    #[error("sampling failed: {accepted} of {attempts} draws reached the manifold")]
    SamplingFailed { accepted: usize, attempts: usize },

    #[error("projection did not converge from any start")]
    NoConvergence { point: Vec<f64> },

    #[error("projection is ambiguous: {candidates} nearest points at distance {distance:.6}")]
    AmbiguousProjection { point: Vec<f64>, candidates: usize, distance: f64 },

    #[error("finite-difference derivative is unstable (discrepancy {discrepancy:.3e})")]
    DerivativeUnstable { point: Vec<f64>, discrepancy: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("mapped point leaves the target manifold (residual {residual:.3e})")]
    MapLeavesManifold { point: Vec<f64>, residual: f64 },

    #[error("budget field `{field}` degenerated to {value:.3e}")]
    BudgetDegenerate { field: String, value: f64 },

    #[error("no point of the manifold lies on the normal fiber")]
    FiberEmpty { target: Vec<f64> },

    #[error("normal fiber meets the manifold {count} times")]
    FiberAmbiguous { target: Vec<f64>, count: usize },

    #[error("reference map leaves the slice at t = {t} (residual {residual:.3e})")]
    ReferenceMapOffSlice { t: f64, point: Vec<f64>, residual: f64 },

    #[error("scalar field `{field}` is not positive ({value:.3e})")]
    NonPositiveField { field: String, value: f64 },

    #[error("point lies outside the declared bounding box")]
    OutsideBoundingBox { point: Vec<f64> },

    #[error("expression error at column {column}: {message}")]
    Expression { column: usize, message: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    /// Name of the subsystem the error originates from.
    pub fn module(&self) -> &'static str {
        match self {
            Error::NotOnManifold { .. }
            | Error::RankDeficient { .. }
            | Error::SamplingFailed { .. }
            | Error::OutsideBoundingBox { .. } => "manifold-core",
            Error::NoConvergence { .. } | Error::AmbiguousProjection { .. } | Error::DerivativeUnstable { .. } => {
                "retraction-engine"
            }
            Error::DimensionMismatch { .. } => "subspace-metrics",
            Error::MapLeavesManifold { .. }
            | Error::BudgetDegenerate { .. }
            | Error::FiberEmpty { .. }
            | Error::FiberAmbiguous { .. } => "equivalence-checker",
            Error::ReferenceMapOffSlice { .. } => "deformation-lab",
            Error::NonPositiveField { .. } => "manifold-core",
            Error::Expression { .. } => "expression",
            Error::Unsupported(_) | Error::Invalid(_) => "input",
        }
    }

    /// The ambient point the failure is attached to, when there is one.
    pub fn witness(&self) -> Option<&[f64]> {
        match self {
            Error::NotOnManifold { point, .. }
            | Error::RankDeficient { point, .. }
            | Error::NoConvergence { point }
            | Error::AmbiguousProjection { point, .. }
            | Error::DerivativeUnstable { point, .. }
            | Error::MapLeavesManifold { point, .. }
            | Error::ReferenceMapOffSlice { point, .. }
            | Error::OutsideBoundingBox { point } => Some(point),
            Error::FiberEmpty { target } | Error::FiberAmbiguous { target, .. } => Some(target),
            _ => None,
        }
    }
}
