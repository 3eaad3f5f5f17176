// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every stage of the pipeline.

use std::fmt;

use crate::trace::Violation;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while building, reading, analysing or
/// intervening on an attention trace.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Token layout cannot be built from the requested span sizes.
    #[error("layout error: {0}")]
    Layout(String),

    /// Attention payload failed the row-sum / range / causality checks.
    #[error("trace validation failed: {}", Violations(.0))]
    Validation(Vec<Violation>),

    /// Dimensions of a trace component disagree with its header.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// File does not start with the `CLVATRC1` magic.
    #[error("bad magic: expected \"CLVATRC1\", found {found:?}")]
    BadMagic { found: String },

    /// Payload shorter than the metadata promises.
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    /// Trailing bytes after the payload the metadata describes.
    #[error("metadata/payload size mismatch: metadata describes {expected} payload bytes, found {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    /// Metadata JSON is malformed or inconsistent.
    #[error("metadata error: {0}")]
    Metadata(String),

    #[error("layer {layer} out of range (trace has {layers} layers)")]
    LayerOutOfRange { layer: usize, layers: usize },

    #[error("head {head} out of range (trace has {heads} heads)")]
    HeadOutOfRange { head: usize, heads: usize },

    #[error("query row {row} is outside the text span {start}..{end}")]
    QueryRowOutOfSpan { row: usize, start: usize, end: usize },

    #[error("empty head set")]
    EmptyHeadSet,

    /// Z-scores need at least two visual tokens.
    #[error("need at least 2 visual tokens for z-scoring, got {0}")]
    TooFewTokens(usize),

    #[error("mask length {got} does not match {expected} anchor columns")]
    MaskLengthMismatch { expected: usize, got: usize },

    #[error("{name} must be non-negative, got {value}")]
    NegativeParameter { name: &'static str, value: f64 },

    #[error("empty mask list")]
    EmptyMaskList,

    /// Entropy requested for a map with no mass.
    #[error("saliency map has no mass; entropy undefined")]
    NoDistribution,

    /// Pearson correlation with a constant input.
    #[error("correlation undefined: {0} input has zero variance")]
    ZeroVariance(&'static str),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("trace carries no value payload")]
    MissingValues,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("token {token} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { token: usize, vocab: usize },

    #[error("heatmap grid {rows}x{cols} does not cover {n} visual tokens")]
    Grid { rows: usize, cols: usize, n: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the underlying byte stream or file system.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Csv(e) => matches!(e.kind(), csv::ErrorKind::Io(_)),
            Error::Json(e) => e.is_io(),
            _ => false,
        }
    }
}

struct Violations<'a>(&'a [Violation]);

impl fmt::Display for Violations<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "{} offending entr", self.0.len())?;
        f.write_str(if self.0.len() == 1 { "y" } else { "ies" })?;
        for v in self.0.iter().take(SHOWN) {
            write!(f, "; {v}")?;
        }
        if self.0.len() > SHOWN {
            write!(f, "; ...")?;
        }
        Ok(())
    }
}
