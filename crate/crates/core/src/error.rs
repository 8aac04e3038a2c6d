use std::path::PathBuf;

/// Failure kinds surfaced by the library.
///
/// The CLI maps these onto process exit codes through [`Error::kind`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    EdgeOutOfRange(usize, usize, usize),

    #[error("node {0} is in more than one of the train/val/test masks")]
    OverlappingMasks(usize),

    #[error("node {node} is in a mask but has no valid label")]
    UnlabeledMaskNode { node: usize },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("shape mismatch in {layer}: {msg}")]
    Shape { layer: String, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("{0}")]
    Other(String),
}

/// Coarse grouping used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Data,
    Usage,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite(_) => ErrorKind::Numeric,
            Error::Config(_) | Error::InvalidSplit(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.into())
        } else {
            Error::Io {
                path: path.into(),
                source,
            }
        }
    }

    pub(crate) fn shape(layer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
