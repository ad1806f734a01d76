use thiserror::Error;

pub type Result<T> = std::result::Result<T, AtmError>;

#[derive(Debug, Error)]
pub enum AtmError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate merge: {0}")]
    DegenerateMerge(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("malformed container header: {0}")]
    MalformedHeader(String),

    #[error("overlapping tensor offsets: `{first}` and `{second}`")]
    OverlappingOffsets { first: String, second: String },

    #[error("tensor `{name}` out of bounds: {detail}")]
    OutOfBounds { name: String, detail: String },

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AtmError {
    /// Short stable tag used on the diagnostic stream and in error records.
    pub fn category(&self) -> &'static str {
        match self {
            AtmError::Shape(_) | AtmError::TensorShape { .. } => "shape",
            AtmError::DegenerateInput(_) => "degenerate-input",
            AtmError::DegenerateMerge(_) => "degenerate-merge",
            AtmError::InvalidConfig(_) => "config",
            AtmError::InvariantViolation(_) => "invariant",
            AtmError::MalformedHeader(_) => "malformed-header",
            AtmError::OverlappingOffsets { .. } => "overlapping-offsets",
            AtmError::OutOfBounds { .. } => "out-of-bounds",
            AtmError::MissingTensor(_) => "missing-tensor",
            AtmError::Parse(_) => "parse",
            AtmError::Io(_) => "io",
        }
    }
}
