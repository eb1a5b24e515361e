//! Error type shared by every fallible operation in the core crate.

use alloc::string::String;

use crate::corpus::LangId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix data length {len} does not fit {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("value {value} at index {index} is not a probability")]
    NotAProbability { index: usize, value: f64 },

    #[error("row {row} is not stochastic (sum {sum})")]
    RowNotStochastic { row: usize, sum: f64 },

    #[error("top-n request out of range: n={n} for {len} classes")]
    TopNOutOfRange { n: usize, len: usize },

    #[error("empty {what}")]
    Empty { what: &'static str },

    #[error("duplicate token {token:?}")]
    DuplicateToken { token: String },

    #[error("inventory needs at least 2 tokens, got {len}")]
    InventoryTooSmall { len: usize },

    #[error("blank index {index} outside inventory of {len} tokens")]
    NoBlankToken { index: usize, len: usize },

    #[error("token index {index} outside inventory of {len} tokens")]
    TokenIndexOutOfRange { index: usize, len: usize },

    #[error("duplicate utterance id {utt_id:?} in language {lang}")]
    DuplicateUttId { lang: LangId, utt_id: String },

    #[error("no encoder for language {lang}")]
    NoEncoderForLanguage { lang: LangId },

    #[error("frame count mismatch: expected {expected}, found {found}")]
    FrameCountMismatch { expected: usize, found: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty reference transcript at index {index}")]
    EmptyReference { index: usize },

    #[error("utterance {utt_id:?} is missing posteriors for source {lang}")]
    MissingSource { lang: LangId, utt_id: String },

    #[error("invalid config: {what}")]
    InvalidConfig { what: &'static str },

    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("accuracy reports disagree on target language: {first} vs {other}")]
    MixedTargets { first: LangId, other: LangId },

    #[error("accuracy report for source {lang} lacks an n={n} entry")]
    MissingAccuracy { lang: LangId, n: usize },
}
