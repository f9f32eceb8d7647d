use thiserror::Error;

/// Errors across the prover, model, dataset, and checkpoint layers.
#[derive(Debug, Error)]
pub enum NatlogError {
    #[error("cannot parse sentence: unexpected token '{token}' at position {position} ({expected})")]
    GrammarParse {
        token: String,
        position: usize,
        expected: String,
    },
    #[error("annotation length mismatch: {tokens} tokens but {rows} projectivity rows")]
    AnnotationLength { tokens: usize, rows: usize },
    #[error("projectivity row {index} is not total: missing entry for relation '{missing}'")]
    NonTotalRow { index: usize, missing: String },
    #[error("projectivity row {index} must map equivalence to itself")]
    EquivalenceNotFixed { index: usize },
    #[error("malformed parse tree: {0}")]
    Tree(String),
    #[error("unknown relation token '{0}'")]
    UnknownRelation(String),
    #[error("unknown label token '{0}'")]
    UnknownLabel(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("degenerate aggregation: total score mass is zero at step {step}")]
    DegenerateState { step: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("dataset line {line}: {reason}")]
    DatasetLine { line: usize, reason: String },
    #[error("lexicon cannot supply a pair with relation '{relation}'")]
    LexiconExhausted { relation: String },
    #[error("no eligible noun for a second hop")]
    NoEligibleNoun,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NatlogError>;
