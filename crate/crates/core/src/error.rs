use std::fmt;

use shallowdiff_autodiff::AutodiffError;

#[derive(Debug)]
pub enum CoreError {
    Autodiff(AutodiffError),
    /// A schedule invariant failed at the given step.
    Schedule {
        invariant: &'static str,
        step: usize,
    },
    InvalidSchedule(String),
    StepOutOfRange {
        t: usize,
        min: usize,
        max: usize,
    },
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    /// The final reverse step (t = 1) must not inject noise.
    NonZeroFinalNoise,
    InvalidScore(String),
    FrameMismatch {
        expected: usize,
        found: usize,
    },
    InvalidConfig(String),
    EmptyDataset,
    NoBoundary {
        tau: f64,
    },
    Divergence(String),
    Format(String),
    Io(std::io::Error),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Autodiff(e) => write!(f, "{e}"),
            Self::Schedule { invariant, step } => {
                write!(f, "schedule invariant violated at t={step}: {invariant}")
            }
            Self::InvalidSchedule(msg) => write!(f, "invalid schedule parameters: {msg}"),
            Self::StepOutOfRange { t, min, max } => {
                write!(f, "step {t} outside the valid range [{min}, {max}]")
            }
            Self::ShapeMismatch {
                what,
                expected,
                found,
            } => write!(
                f,
                "{what}: expected {}x{} grid, found {}x{}",
                expected.0, expected.1, found.0, found.1
            ),
            Self::NonZeroFinalNoise => write!(f, "reverse step at t=1 requires z = 0"),
            Self::InvalidScore(msg) => write!(f, "invalid music score: {msg}"),
            Self::FrameMismatch { expected, found } => {
                write!(f, "frame count mismatch: expected {expected}, found {found}")
            }
            Self::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Self::EmptyDataset => write!(f, "dataset is empty"),
            Self::NoBoundary { tau } => write!(
                f,
                "no item reaches the 95% margin rule at threshold {tau}; try a larger threshold"
            ),
            Self::Divergence(msg) => write!(f, "numerical divergence: {msg}"),
            Self::Format(msg) => write!(f, "malformed file: {msg}"),
            Self::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CoreError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Autodiff(e) => Some(e),
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<AutodiffError> for CoreError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::NonFinite { op } => Self::Divergence(format!("{op} produced a non-finite value")),
            AutodiffError::NonFiniteGradient { param } => {
                Self::Divergence(format!("non-finite gradient for `{param}`"))
            }
            other => Self::Autodiff(other),
        }
    }
}

impl From<std::io::Error> for CoreError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
