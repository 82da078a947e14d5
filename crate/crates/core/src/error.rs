//! Error type shared by all numerical routines in the crate.

use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

/// Failure modes of the numerical routines.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Cholesky factorization failed even after jitter escalation.
    NotPositiveDefinite { size: usize, jitter: f64 },
    /// A (tri)diagonal solve hit a pivot below the singularity threshold.
    SingularSystem { index: usize },
    /// Operand shapes are incompatible.
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    /// Two sequences that must have equal length do not.
    LengthMismatch { expected: usize, got: usize },
    /// An analytic gradient component is NaN or infinite.
    NonFiniteGradient { index: usize },
    /// Spline knots are not strictly increasing.
    NonMonotonicKnots { index: usize },
    /// Two spline knots coincide.
    DuplicateKnot { index: usize },
    /// The integrated state left the finite range.
    NonFiniteState { time: f64 },
    /// Adaptive step control shrank the step below the minimum.
    StepSizeUnderflow { time: f64, step: f64 },
    /// A mesh element has (near) zero width.
    DegenerateElement { index: usize, width: f64 },
    /// An argument is outside the mathematical domain of the operation.
    DomainError { what: &'static str },
    /// Training produced a NaN or infinite loss.
    NonFiniteLoss { epoch: usize },
    /// The spatial grid is too small for the requested number of modes.
    GridTooSmall { grid: usize, required: usize },
    /// Input channel count does not match the network configuration.
    ChannelMismatch { expected: usize, got: usize },
    /// A variance-normalized metric was asked for on constant targets.
    ZeroVariance,
    /// A scalar argument violates a documented precondition.
    InvalidArgument { what: &'static str },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NotPositiveDefinite { size, jitter } => write!(
                f,
                "{size}x{size} matrix is not positive definite (final jitter {jitter:e})"
            ),
            Error::SingularSystem { index } => {
                write!(f, "singular system: pivot {index} below threshold")
            }
            Error::DimensionMismatch { expected, got } => write!(
                f,
                "dimension mismatch: expected {}x{}, got {}x{}",
                expected.0, expected.1, got.0, got.1
            ),
            Error::LengthMismatch { expected, got } => {
                write!(f, "length mismatch: expected {expected}, got {got}")
            }
            Error::NonFiniteGradient { index } => {
                write!(f, "gradient component {index} is not finite")
            }
            Error::NonMonotonicKnots { index } => {
                write!(f, "knots not strictly increasing at index {index}")
            }
            Error::DuplicateKnot { index } => write!(f, "duplicate knot at index {index}"),
            Error::NonFiniteState { time } => {
                write!(f, "state became non-finite at t = {time}")
            }
            Error::StepSizeUnderflow { time, step } => {
                write!(f, "step size underflow at t = {time} (h = {step:e})")
            }
            Error::DegenerateElement { index, width } => {
                write!(f, "degenerate element {index} (width {width:e})")
            }
            Error::DomainError { what } => write!(f, "domain error: {what}"),
            Error::NonFiniteLoss { epoch } => write!(f, "non-finite loss at epoch {epoch}"),
            Error::GridTooSmall { grid, required } => {
                write!(f, "grid size {grid} below required {required}")
            }
            Error::ChannelMismatch { expected, got } => {
                write!(f, "channel mismatch: expected {expected}, got {got}")
            }
            Error::ZeroVariance => write!(f, "target variance is zero"),
            Error::InvalidArgument { what } => write!(f, "invalid argument: {what}"),
        }
    }
}

impl core::error::Error for Error {}
