use std::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor was constructed or combined with an invalid shape.
    InvalidShape { op: &'static str, detail: String },
    /// Two operands disagree on a dimension.
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    /// A scalar argument is out of its valid range.
    InvalidArgument { op: &'static str, detail: String },
    /// Backward was requested on a tensor with no recorded history.
    DetachedBackward,
    /// A gradient contained NaN; carries the parameter name.
    NanGradient { name: String },
    /// Training loss diverged.
    Diverged { step: usize, loss: f64, initial: f64 },
    /// Weight container violates its format contract.
    WeightFormat { detail: String },
    /// Loaded manifest does not match the target model; carries a full diff.
    WeightMismatch { diff: Vec<String> },
    /// Configuration file failed validation.
    Config { detail: String },
    /// Image file could not be decoded.
    Image { detail: String },
    /// Underlying I/O failure.
    Io { detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidShape { op, detail } => write!(f, "{op}: invalid shape: {detail}"),
            Error::ShapeMismatch { op, expected, got } => {
                write!(f, "{op}: shape mismatch: expected {expected}, got {got}")
            }
            Error::InvalidArgument { op, detail } => write!(f, "{op}: {detail}"),
            Error::DetachedBackward => {
                write!(f, "backward called on a detached tensor with no recorded operations")
            }
            Error::NanGradient { name } => write!(f, "NaN gradient for parameter `{name}`"),
            Error::Diverged { step, loss, initial } => write!(
                f,
                "training diverged at step {step}: loss {loss:e} vs initial {initial:e}"
            ),
            Error::WeightFormat { detail } => write!(f, "weight container: {detail}"),
            Error::WeightMismatch { diff } => {
                writeln!(f, "weight container does not match the target model:")?;
                for line in diff {
                    writeln!(f, "  {line}")?;
                }
                Ok(())
            }
            Error::Config { detail } => write!(f, "config: {detail}"),
            Error::Image { detail } => write!(f, "image: {detail}"),
            Error::Io { detail } => write!(f, "io: {detail}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io { detail: e.to_string() }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config { detail: e.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
