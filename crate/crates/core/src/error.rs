use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no points")]
    NoPoints,
    #[error("scene emptied")]
    SceneEmptied,
    #[error("degenerate view")]
    DegenerateView,
    #[error("quantization overflow")]
    QuantizationOverflow,
    #[error("support exceeded: symbol {symbol} outside [-{bound}, {bound}]")]
    SupportExceeded { symbol: i64, bound: i64 },
    #[error("zero-probability symbol {0}")]
    ZeroProbability(i64),
    #[error("unexpected end of bitstream")]
    UnexpectedEof,
    #[error("grid overflow")]
    GridOverflow,
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported bitstream version {0}")]
    UnsupportedVersion(u8),
    #[error("section length mismatch: {0}")]
    SectionLength(String),
    #[error("checksum mismatch")]
    Checksum,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite gradient in parameter group `{0}`")]
    NonFiniteGradient(&'static str),
    #[error("training diverged at step {0}")]
    Diverged(usize),
    #[error("{path}: {message}")]
    Dataset { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dataset(path: impl AsRef<std::path::Path>, message: impl ToString) -> Self {
        Error::Dataset {
            path: path.as_ref().display().to_string(),
            message: message.to_string(),
        }
    }
}
