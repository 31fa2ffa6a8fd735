use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Variant names are stable: the CLI and mask service report them verbatim
/// as the machine-readable error kind.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("need at least {needed} training patches, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("code index {index} out of range for codebook of {k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("malformed depth sequence: {0}")]
    MalformedSequence(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("malformed box tokens: {0}")]
    MalformedBox(String),
    #[error("invalid epoch plan: {0}")]
    InvalidPlan(String),
    #[error("image `{0}` lacks a CoT or direct-labeling sample")]
    MissingPair(String),
    #[error("degenerate markers: {0}")]
    DegenerateMarkers(String),
    #[error("invalid grammar: {0}")]
    InvalidGrammar(String),
    #[error("token {token} is not allowed in the current decode state")]
    IllegalToken { token: u32 },
    #[error("sequence exceeded the maximum length of {0} tokens")]
    MaxLengthExceeded(usize),
    #[error("transcript contains no auxiliary tokens")]
    NoAuxSpan,
    #[error("support mismatch: {0}")]
    SupportMismatch(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("expected {expected} distributions, got {got}")]
    BadArity { expected: usize, got: usize },
    #[error("marker placement infeasible after {0} attempts")]
    PlacementInfeasible(usize),
    #[error("unparseable answer: {0}")]
    Unparseable(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid PGM: {0}")]
    Pgm(String),
    #[error("codebook file: {0}")]
    CodebookFormat(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable name of the variant, used as the error kind on the wire.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnknownToken(_) => "UnknownToken",
            Error::InvalidVocabulary(_) => "InvalidVocabulary",
            Error::InsufficientData { .. } => "InsufficientData",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::MalformedSequence(_) => "MalformedSequence",
            Error::InvalidBox(_) => "InvalidBox",
            Error::MalformedBox(_) => "MalformedBox",
            Error::InvalidPlan(_) => "InvalidPlan",
            Error::MissingPair(_) => "MissingPair",
            Error::DegenerateMarkers(_) => "DegenerateMarkers",
            Error::InvalidGrammar(_) => "InvalidGrammar",
            Error::IllegalToken { .. } => "IllegalToken",
            Error::MaxLengthExceeded(_) => "MaxLengthExceeded",
            Error::NoAuxSpan => "NoAuxSpan",
            Error::SupportMismatch(_) => "SupportMismatch",
            Error::InvalidDistribution(_) => "InvalidDistribution",
            Error::BadArity { .. } => "BadArity",
            Error::PlacementInfeasible(_) => "PlacementInfeasible",
            Error::Unparseable(_) => "Unparseable",
            Error::InvalidSchedule(_) => "InvalidSchedule",
            Error::Pgm(_) => "Pgm",
            Error::CodebookFormat(_) => "CodebookFormat",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
