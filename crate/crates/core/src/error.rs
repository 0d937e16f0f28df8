use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("basis vector is not unit length (norm {norm})")]
    NonUnitVector { norm: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training data contains a single class")]
    SingleClass,

    #[error("empty data")]
    EmptyData,

    #[error("probe loss became NaN at epoch {epoch}; lower the learning rate")]
    NanLoss { epoch: usize },

    #[error("probe loss increased at epoch {epoch} ({previous} -> {current}); lower the learning rate")]
    NonMonotoneLoss { epoch: usize, previous: f64, current: f64 },

    #[error("probe weight vector is zero; training degenerated")]
    ZeroWeight,

    #[error("unbalanced labels: {singular} singular vs {plural} plural")]
    Unbalanced { singular: usize, plural: usize },

    #[error("out-of-vocabulary token {0:?}")]
    OutOfVocabulary(String),

    #[error("unknown token id {0}")]
    UnknownTokenId(u32),

    #[error("sequence of length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("sentence has no {0} position")]
    MissingRole(&'static str),

    #[error("requested {requested} items but only {available} are available")]
    InsufficientPool { requested: usize, available: usize },

    #[error("training diverged (NaN loss) at step {step}")]
    Divergence { step: usize },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}
