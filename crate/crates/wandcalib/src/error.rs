//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the calibration library.
#[derive(Error, Debug, Clone)]
pub enum Error {
    /// An argument violated a precondition (zero-norm point, bad geometry, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A point lies outside the usable field of view of the camera model.
    #[error("point at {theta:.4} rad exceeds max half-FOV {theta_max:.4} rad (+ margin {margin:.4})")]
    OutOfFov {
        theta: f64,
        theta_max: f64,
        margin: f64,
    },

    /// A pixel maps outside the invertible radial range of the distortion polynomial.
    #[error("radial distance {rho:.6} mm outside invertible range [0, {rho_max:.6}] mm")]
    OutOfRange { rho: f64, rho_max: f64 },

    /// The distortion polynomial is not strictly increasing on its domain.
    #[error("radial polynomial is not monotone on [0, {theta_max:.4}] (first violation near theta = {theta:.4})")]
    NonMonotone { theta: f64, theta_max: f64 },

    /// The observation geometry cannot constrain the requested model.
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    /// Robust estimation did not find an acceptable model.
    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    /// No essential-matrix candidate was uniquely supported by cheirality votes.
    #[error("ambiguous essential decomposition: {votes:?} cheirality votes per candidate")]
    AmbiguousDecomposition { votes: [usize; 4] },

    /// Triangulation produced a point at (or numerically at) infinity.
    #[error("triangulated point at infinity (|w| = {w:.3e})")]
    AtInfinity { w: f64 },

    /// A numeric evaluation produced a non-finite value; carries the last usable state.
    #[error("numeric failure during optimization: {reason}")]
    NumericFailure {
        reason: String,
        last_good: Vec<f64>,
    },

    /// The reduced normal equations are singular.
    #[error("rank-deficient normal equations; unconstrained block: {block}")]
    RankDeficient { block: String },

    /// Too few usable frames for the requested calibration.
    #[error("insufficient frames: {got} usable, {need} required")]
    InsufficientFrames { got: usize, need: usize },

    /// Cameras not connected to the reference camera in the vision graph.
    #[error("cameras unreachable from reference {reference}: {unreachable:?}")]
    UnreachableCamera {
        reference: usize,
        unreachable: Vec<usize>,
    },

    /// The calibration pipeline could not produce a result.
    #[error("calibration failed at {stage}: {reason}")]
    CalibrationFailed { stage: String, reason: String },

    /// A synthetic scenario rejects almost every sampled frame.
    #[error("infeasible scenario: {accepted} frames accepted out of {attempted} attempts")]
    InfeasibleScenario { accepted: usize, attempted: usize },

    /// Malformed or inconsistent observation/calibration file.
    #[error("parse error: {0}")]
    Parse(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
