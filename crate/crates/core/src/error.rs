//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible; carries both shapes.
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    /// A matrix with zero rows or columns where data is required.
    EmptyMatrix { op: &'static str },
    /// Non-finite values where finite input is required.
    NonFinite { op: &'static str },
    /// A class label outside `0..num_classes`.
    LabelOutOfRange { label: usize, num_classes: usize },
    /// `backward` called on a non-scalar tensor.
    NonScalarLoss { shape: (usize, usize) },
    /// API misuse not covered by a more specific variant.
    Usage(String),
    /// Training diverged (non-finite loss) at the given step.
    Diverged { step: usize },
    /// Noise optimization produced a non-finite loss at the given step.
    NoiseDiverged { step: usize },
    /// No vector exists in the requested orthogonal complement.
    EmptyComplement,
    /// A fine-tuning round's noise failed to reach the threshold and the
    /// configured policy is to abort.
    NoiseNotConverged { round: usize, delta: f64 },
    /// Iterative factorization failed to converge.
    NoConvergence { op: &'static str, sweeps: usize },
    /// Scale calibration (bisection) failed to bracket the target.
    CalibrationFailed { target: f64, achieved: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => write!(
                f,
                "{op}: shape mismatch {}x{} vs {}x{}",
                lhs.0, lhs.1, rhs.0, rhs.1
            ),
            Error::EmptyMatrix { op } => write!(f, "{op}: empty matrix"),
            Error::NonFinite { op } => write!(f, "{op}: non-finite input"),
            Error::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} out of range for {num_classes} classes")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got {}x{}", shape.0, shape.1)
            }
            Error::Usage(msg) => write!(f, "{msg}"),
            Error::Diverged { step } => write!(f, "training diverged at step {step}"),
            Error::NoiseDiverged { step } => {
                write!(f, "noise optimization diverged at step {step}")
            }
            Error::EmptyComplement => {
                write!(f, "orthogonal complement is empty; conditions violated numerically")
            }
            Error::NoiseNotConverged { round, delta } => {
                write!(f, "round {round}: noise stopped at delta {delta:.4} above threshold")
            }
            Error::NoConvergence { op, sweeps } => {
                write!(f, "{op}: no convergence after {sweeps} sweeps")
            }
            Error::CalibrationFailed { target, achieved } => {
                write!(f, "calibration failed: target {target}, achieved {achieved}")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
