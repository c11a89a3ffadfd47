use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    Shape { context: String },
    /// A value violated an operation's contract (e.g. negative activations
    /// fed to a rule that requires non-negative inputs).
    Contract { context: String },
    /// A non-finite value (NaN or infinity) was encountered.
    NonFinite { context: String },
    /// A file could not be parsed.
    Parse { path: String, detail: String },
    /// A weight file declares an unsupported format version.
    Version { found: i64, supported: i64 },
    /// A weight file declares a layer type this engine does not know.
    UnknownLayerType { found: String, supported: &'static str },
    /// A weight file's array lengths are inconsistent with its shape fields.
    Dimension { layer: String, detail: String },
    /// Behavioral cloning diverged (loss became non-finite).
    Training { epoch: usize, detail: String },
    /// Invalid configuration (bad episode file, unreachable target, ...).
    Config { detail: String },
    /// Underlying I/O failure.
    Io { path: String, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { context } => write!(f, "shape mismatch: {context}"),
            Error::Contract { context } => write!(f, "contract violation: {context}"),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::Parse { path, detail } => write!(f, "failed to parse {path}: {detail}"),
            Error::Version { found, supported } => {
                write!(f, "unsupported weight file version {found} (supported: {supported})")
            }
            Error::UnknownLayerType { found, supported } => {
                write!(f, "unknown layer type {found:?} (supported: {supported})")
            }
            Error::Dimension { layer, detail } => {
                write!(f, "dimension inconsistency in {layer}: {detail}")
            }
            Error::Training { epoch, detail } => {
                write!(f, "training diverged at epoch {epoch}: {detail}")
            }
            Error::Config { detail } => write!(f, "invalid configuration: {detail}"),
            Error::Io { path, detail } => write!(f, "i/o error on {path}: {detail}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub(crate) fn shape(context: impl Into<String>) -> Self {
        Error::Shape { context: context.into() }
    }

    pub(crate) fn contract(context: impl Into<String>) -> Self {
        Error::Contract { context: context.into() }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config { detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<String>, err: std::io::Error) -> Self {
        Error::Io { path: path.into(), detail: err.to_string() }
    }
}
