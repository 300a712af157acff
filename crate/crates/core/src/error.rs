use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("target id {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds context length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("document too short: {0} tokens, need at least 2")]
    DocumentTooShort(usize),
    #[error("empty document")]
    EmptyDocument,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("base model must be frozen before adapter training")]
    NotFrozen,
    #[error("base model is frozen")]
    Frozen,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("rank {rank} exceeds min(d_in, d_out) = {limit}")]
    RankTooLarge { rank: usize, limit: usize },
    #[error("layer {0} is not targeted by this adapter")]
    LayerNotTargeted(String),
    #[error("base model hash mismatch: expected {expected}, found {found}")]
    BaseHashMismatch { expected: String, found: String },
    #[error("stale adapter: manifest {adapter} does not match group manifest {group}")]
    ManifestMismatch { adapter: String, group: String },
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("no accessible adapters")]
    NoAccessibleAdapters,
    #[error("unknown document {0}")]
    UnknownDocument(String),
    #[error("document {0} already purged")]
    AlreadyPurged(String),
    #[error("unknown adapter {0}")]
    UnknownAdapter(String),
    #[error("unknown group {0}")]
    UnknownGroup(String),
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("group {0} has no trained adapter")]
    UntrainedGroup(String),
    #[error("duplicate document id {0}")]
    DuplicateDocId(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("registry is locked by another writer")]
    Locked,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
