use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum AutodiffError {
    DataLength {
        shape: Vec<usize>,
        len: usize,
    },
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    InnerExtent {
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    EvenKernel(usize),
    InvalidArgument {
        op: &'static str,
        reason: String,
    },
    NonFinite {
        op: &'static str,
    },
    NonScalarLoss(Vec<usize>),
    BackwardTwice,
    UnknownParam(String),
    NonFiniteGradient {
        param: String,
    },
    StateMismatch {
        param: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl fmt::Display for AutodiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DataLength { shape, len } => {
                write!(f, "data length {len} does not match shape {shape:?}")
            }
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Self::InnerExtent { lhs, rhs } => {
                write!(f, "matmul: inner extents differ for {lhs:?} and {rhs:?}")
            }
            Self::EvenKernel(k) => write!(f, "conv1d: kernel size {k} must be odd"),
            Self::InvalidArgument { op, reason } => write!(f, "{op}: {reason}"),
            Self::NonFinite { op } => write!(f, "{op} produced a non-finite value"),
            Self::NonScalarLoss(shape) => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Self::BackwardTwice => write!(f, "backward already ran on this tape"),
            Self::UnknownParam(name) => write!(f, "unknown parameter `{name}`"),
            Self::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient for parameter `{param}`")
            }
            Self::StateMismatch {
                param,
                expected,
                found,
            } => write!(
                f,
                "optimizer state for `{param}` has shape {found:?}, parameter has {expected:?}"
            ),
        }
    }
}

impl std::error::Error for AutodiffError {}
