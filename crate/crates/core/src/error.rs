use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph")]
    DoubleBackward,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("task {task} requires {needs}")]
    MissingLabels { task: &'static str, needs: &'static str },
    #[error("no masked frames in batch")]
    NoMaskedFrames,
    #[error("malformed file: {0}")]
    Format(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Short stable identifier used by the command line error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "nonfinite",
            Error::NonScalarLoss(_) | Error::DoubleBackward => "graph",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::MissingLabels { .. } => "labels",
            Error::NoMaskedFrames => "mask",
            Error::Format(_) => "format",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
