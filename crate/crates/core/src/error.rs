use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("not a pcap file (magic {0:#010x})")]
    BadMagic(u32),
    #[error("truncated pcap global header ({0} bytes)")]
    TruncatedHeader(usize),
    #[error("unsupported pcap link type {0} (only Ethernet is supported)")]
    UnsupportedLinkType(u32),

    #[error("stream has {0} queries; at least 2 are required to derive a time delta")]
    DegenerateStream(usize),
    #[error("invalid sequencing config: {0}")]
    BadSequencingConfig(String),

    #[error("empty corpus")]
    EmptyCorpus,
    #[error("sequence of length {len} exceeds capacity {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("invalid masking probabilities: {0}")]
    BadProbabilities(String),

    #[error("invalid sequence length {len} for capacity {cap}")]
    BadLength { len: usize, cap: usize },
    #[error("not a permutation of 0..{0}")]
    BadPermutation(usize),
    #[error("unknown topology '{0}'")]
    UnknownTopology(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} at element {index}")]
    NonFiniteDetected { op: &'static str, index: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("{kind} id {id} out of range (size {size})")]
    IdOutOfRange {
        kind: &'static str,
        id: usize,
        size: usize,
    },
    #[error("batch has no masked positions")]
    NoMaskedPositions,
    #[error("missing labels: {0}")]
    MissingLabels(String),
    #[error("sequence contains no <MASK> token")]
    NoMaskPresent,
    #[error("invalid model config: {0}")]
    BadModelConfig(String),
    #[error("model has no {0} head")]
    WrongHead(&'static str),

    #[error("vocabulary mismatch: checkpoint {checkpoint}, corpus {corpus}")]
    VocabMismatch { checkpoint: String, corpus: String },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid training config: {0}")]
    BadTrainConfig(String),

    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("domain '{0}' has no embedding")]
    MissingDomain(String),

    #[error("invalid synth config: {0}")]
    BadConfig(String),
}

impl Error {
    /// CLI exit code family: 2 for data errors, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteDetected { .. } | Error::NonFiniteLoss { .. } => 3,
            _ => 2,
        }
    }
}
