use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("line {line}: expected {expected} values, found {found}")]
    RaggedRows {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: non-numeric token {token:?}")]
    NonNumeric { line: usize, token: String },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("manifest parse error: {0}")]
    ManifestParse(String),
    #[error("unknown layer kind {0:?}")]
    UnknownLayerKind(String),

    #[error("degenerate design: all perturbation masks are identical")]
    DegenerateDesign,
    #[error("missing attributions: {0}")]
    MissingAttributions(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("perplexity {perplexity} too large for {n} samples")]
    PerplexityTooLarge { perplexity: f64, n: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("no training sample is predicted differently from the query")]
    NoUnlikeNeighbor,
    #[error("no class flip within {iters} iterations")]
    NoFlipWithinBudget { iters: usize },

    #[error("missing context: {0}")]
    MissingContext(&'static str),
    #[error("unknown attribution method {0:?}")]
    UnknownMethod(String),
}
