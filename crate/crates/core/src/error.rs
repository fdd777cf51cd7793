use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate premise name `{0}`")]
    DuplicatePremise(String),

    #[error("duplicate proof for theorem `{0}`")]
    DuplicateProof(String),

    #[error("not enough proofs: requested {requested}, available {available}")]
    InsufficientProofs { requested: usize, available: usize },

    #[error("empty proof `{0}` has no premise frequency")]
    EmptyProof(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("unknown token id {0}")]
    UnknownTokenId(u32),

    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("zero-norm embedding")]
    ZeroNorm,

    #[error("non-finite loss {loss} at step {step}: {detail}")]
    NonFiniteLoss { step: usize, loss: f64, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
