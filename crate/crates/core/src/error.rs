use std::fmt;

/// Crate-wide error type. Every fallible public operation returns one of
/// these variants; the CLI maps them onto its exit-code table.
#[derive(Debug)]
pub enum Error {
    /// Tensor extents incompatible with the requested operation.
    ShapeMismatch(String),
    /// A channel count is not divisible by a requested group count.
    InvalidGroups(String),
    /// A configuration violates its invariants (splits, schedules, depths).
    InvalidConfig(String),
    /// An ablation or enum name that does not exist.
    UnknownVariant(String),
    /// The objective of a gradient check evaluated to NaN or infinity.
    NonFiniteObjective(String),
    /// Training loss became non-finite.
    DivergenceDetected(String),
    /// Filesystem failure while reading or writing an artifact.
    Io(std::io::Error),
    /// A weight file failed structural or checksum validation.
    CorruptWeights(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            Error::InvalidGroups(m) => write!(f, "invalid groups: {m}"),
            Error::InvalidConfig(m) => write!(f, "invalid config: {m}"),
            Error::UnknownVariant(m) => write!(f, "unknown variant: {m}"),
            Error::NonFiniteObjective(m) => write!(f, "non-finite objective: {m}"),
            Error::DivergenceDetected(m) => write!(f, "divergence detected: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::CorruptWeights(m) => write!(f, "corrupt weight file: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
