//! One error enum for the whole crate; variants carry enough context to be
//! actionable from the command line.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // dataset parsing and loading
    #[error("malformed JSON at {context}: {detail}")]
    MalformedJson { context: String, detail: String },
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("io failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("batch size {requested} exceeds dataset size {available}")]
    BatchTooLarge { requested: usize, available: usize },

    // featurization
    #[error("text is empty after trimming")]
    EmptyText,
    #[error("unreadable image `{reference}`: {detail}")]
    UnreadableImage { reference: String, detail: String },
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    // encoding
    #[error("degenerate encoder output: pre-normalization norm {norm:e}")]
    DegenerateOutput { norm: f64 },

    // loss
    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("embedding batch is missing role {0}")]
    MissingRole(String),

    // training
    #[error("batch contains a zero-feature item (card `{card_id}`)")]
    DegenerateBatch { card_id: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("checkpoint checksum mismatch for {path}")]
    ChecksumMismatch { path: String },
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),

    // curation
    #[error("backend unavailable after {attempts} attempts: {detail}")]
    BackendUnavailable { attempts: u32, detail: String },
    #[error("generation rejected: {0}")]
    GenerationRejected(String),
    #[error("unparseable backend response for {stage}: {detail}")]
    ParseFailure { stage: String, detail: String },
    #[error("invalid twin for `{concept}`: {detail}")]
    InvalidTwin { concept: String, detail: String },
    #[error("judge response is not a score in 1..=5: {0:?}")]
    ScoreParseFailure(String),

    // evaluation
    #[error("degenerate ranking item `{0}`: an option has zero features")]
    DegenerateItem(String),
    #[error("recall k={k} exceeds corpus size {n}")]
    KExceedsCorpus { k: usize, n: usize },

    // configuration
    #[error("bad config: {0}")]
    BadConfig(String),
}

impl Error {
    /// Wrap an io error with the path that produced it.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}
