use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while encoding or decoding a tensor container.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContainerError {
    #[error("file truncated: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unknown dtype `{dtype}` for tensor `{name}`")]
    UnknownDtype { name: String, dtype: String },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}`: shape implies {expected} values, got {actual}")]
    ShapeMismatch { name: String, expected: usize, actual: usize },
    #[error("tensor `{name}` spans bytes {start}..{end} beyond data section of {len} bytes")]
    OutOfBounds { name: String, start: u64, end: u64, len: u64 },
    #[error("tensor `{name}` overlaps or leaves a gap before offset {offset} (expected {expected})")]
    Overlap { name: String, offset: u64, expected: u64 },
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(u64),
}

/// Schema violations in a layout-spec JSON document. Each variant is distinct so
/// callers can assert on the failure kind.
#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("invalid grid {h}x{w}x{c}: every dimension must be >= 1")]
    InvalidGrid { h: usize, w: usize, c: usize },
    #[error("subject `{id}`: box coordinate {value} outside [0, 1]")]
    BoxOutOfRange { id: String, value: f64 },
    #[error("subject `{id}`: degenerate box [{x0}, {y0}, {x1}, {y1}] (need x0 < x1 and y0 < y1)")]
    BoxDegenerate { id: String, x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("subject `{id}`: box must have exactly 4 coordinates, got {len}")]
    BoxArity { id: String, len: usize },
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("duplicate subject id `{0}`")]
    DuplicateSubject(String),
    #[error("steps must be >= 1, got {0}")]
    InvalidSteps(i64),
    #[error("unknown mode `{0}` (expected anyms|masked-sum|global-sum|text-only)")]
    UnknownMode(String),
    #[error("field `{field}` must be finite and >= 0, got {value}")]
    InvalidScale { field: &'static str, value: f64 },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("container: {0}")]
    Container(#[from] ContainerError),
    #[error("layout spec: {0}")]
    Spec(#[from] SpecError),
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Process exit code: 1 for I/O, 3 for numeric failure, 2 for everything the
    /// caller could fix by changing its input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 1,
            Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}
