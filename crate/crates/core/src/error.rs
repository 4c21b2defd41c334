use thiserror::Error;

/// Errors produced by the retrieval engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid span [{start}, {end}) over text of {len} characters")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },

    #[error("span surface {surface:?} does not match host text {found:?}")]
    SurfaceMismatch { surface: String, found: String },

    #[error("unknown entity type {0:?}")]
    UnknownEntityType(String),

    #[error("template {0:?} must contain exactly one [E] placeholder")]
    BadTemplate(String),

    #[error("question does not match template {0:?}")]
    NoMatch(String),

    #[error("unknown relation {0:?}")]
    UnknownRelation(String),

    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("unknown passage {0:?}")]
    UnknownPassage(String),

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("duplicate key id {0:?}")]
    DuplicateKeyId(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("vector for {0:?} has zero (or non-finite) norm")]
    ZeroVector(String),

    #[error("vector for {id:?} is not unit norm (norm {norm})")]
    NotNormalized { id: String, norm: f64 },

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("empty input")]
    EmptyInput,

    #[error("passage has no keys")]
    NoKeys,

    #[error("k must be at least 1")]
    InvalidK,

    #[error("no IDF value for key {0:?}")]
    MissingIdf(String),

    #[error("index is empty")]
    EmptyIndex,

    #[error("entity surface {0:?} has no tokens")]
    NoTokens(String),

    #[error("record {0:?} has no entity")]
    MissingEntity(String),

    #[error("cannot split {records} records into {buckets} buckets")]
    TooManyBuckets { records: usize, buckets: usize },

    #[error("unknown conditioning mode {0:?}")]
    UnknownMode(String),

    #[error("unknown sampler {0:?}")]
    UnknownSampler(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
