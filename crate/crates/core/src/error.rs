use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which side of a bad reward-server response was wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseFault {
    Shape,
    Range,
    Status,
    Body,
}

impl std::fmt::Display for ResponseFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ResponseFault::Shape => "shape",
            ResponseFault::Range => "range",
            ResponseFault::Status => "status",
            ResponseFault::Body => "body",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    // sequences and repertoire files
    #[error("invalid residue {ch:?} at position {position}")]
    InvalidResidue { ch: char, position: usize },
    #[error("malformed encoding: {0}")]
    MalformedEncoding(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // tensor engine
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
    #[error("target id {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    // model and checkpoints
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token row of length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("malformed token row: {0}")]
    MalformedRow(String),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint CRC mismatch")]
    CrcMismatch,
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),

    // language model
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("sequence of {len} residues does not fit max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("enumeration of {count} sequences exceeds limit {limit}")]
    EnumerationTooLarge { count: u128, limit: u128 },

    // analysis
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("zero variance input")]
    ZeroVariance,
    #[error("distribution sums to {0}, expected 1")]
    NotNormalized(f64),
    #[error("negative probability {value} at index {index}")]
    NegativeEntry { index: usize, value: f64 },
    #[error("generated sequence list is empty")]
    EmptyGenerated,

    // classification
    #[error("labels must contain at least two examples of each class")]
    DegenerateLabels,
    #[error("AUC needs both classes present")]
    SingleClass,
    #[error("class {class} has {count} examples, fewer than k={k}")]
    TooFewPerClass { class: u8, count: usize, k: usize },

    // reinforcement learning
    #[error("probability ratio must be positive, got {0}")]
    NonPositiveRatio(f64),
    #[error("reward endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("bad reward response ({fault}): {detail}")]
    BadResponse { fault: ResponseFault, detail: String },
    #[error("reward request timed out")]
    Timeout,
    #[error("{rate:.3} of samples failed to terminate")]
    NonTermination { rate: f64 },
    #[error("score list is empty")]
    EmptyScores,

    // command line
    #[error("unknown command {0}")]
    UnknownCommand(String),
    #[error("config key {key}: {reason}")]
    Config { key: String, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Stable machine-readable category, printed by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidResidue { .. } => "InvalidResidue",
            Error::MalformedEncoding(_) => "MalformedEncoding",
            Error::Parse { .. } => "ParseError",
            Error::Io { .. } => "Io",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::TargetOutOfRange { .. } => "TargetOutOfRange",
            Error::NotScalar(_) => "NotScalar",
            Error::TapeConsumed => "TapeConsumed",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::TooLong { .. } => "TooLong",
            Error::MalformedRow(_) => "MalformedRow",
            Error::BadMagic => "BadMagic",
            Error::UnsupportedVersion(_) => "UnsupportedVersion",
            Error::CrcMismatch => "CrcMismatch",
            Error::MissingTensor(_) => "MissingTensor",
            Error::EmptyCorpus => "EmptyCorpus",
            Error::SequenceTooLong { .. } => "SequenceTooLong",
            Error::EnumerationTooLarge { .. } => "EnumerationTooLarge",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::ZeroVariance => "ZeroVariance",
            Error::NotNormalized(_) => "NotNormalized",
            Error::NegativeEntry { .. } => "NegativeEntry",
            Error::EmptyGenerated => "EmptyGenerated",
            Error::DegenerateLabels => "DegenerateLabels",
            Error::SingleClass => "SingleClass",
            Error::TooFewPerClass { .. } => "TooFewPerClass",
            Error::NonPositiveRatio(_) => "NonPositiveRatio",
            Error::Unreachable(_) => "Unreachable",
            Error::BadResponse { .. } => "BadResponse",
            Error::Timeout => "Timeout",
            Error::NonTermination { .. } => "NonTermination",
            Error::EmptyScores => "EmptyScores",
            Error::UnknownCommand(_) => "UnknownCommand",
            Error::Config { .. } => "ConfigError",
        }
    }
}
