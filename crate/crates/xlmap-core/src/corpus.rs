//! Corpus-side domain types: language ids, token inventories, manifests and
//! posterior sequences.
//!
//! Validation lives in the constructors so that an instance, once built, can
//! be trusted everywhere downstream. Deserialisation routes through the same
//! constructors (`serde(try_from = ...)`) and therefore cannot smuggle in an
//! invalid inventory.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::error::Error;
use crate::math;
use crate::numerics::Matrix;

/// Tolerance on `|row sum - 1|` for posterior sequences. File loaders use the
/// same bound before renormalising.
pub const SEQ_ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Default word-boundary marker token character.
pub const DEFAULT_SPACE_MARKER: char = '_';

/// Short language tag such as `"jav"` or `"tam"`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct LangId(String);

impl LangId {
    pub fn new(tag: impl Into<String>) -> Self {
        LangId(tag.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LangId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LangId {
    fn from(tag: &str) -> Self {
        LangId(tag.to_string())
    }
}

/// Phone token inventory of one language.
///
/// Token index 0..len map softmax classes to strings; `blank_index` marks the
/// CTC-style blank and `space_marker` is the character substituted by a space
/// during detokenisation.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "RawTokenInventory"))]
pub struct TokenInventory {
    lang_id: LangId,
    tokens: Vec<String>,
    blank_index: usize,
    space_marker: char,
}

#[cfg(feature = "serde")]
#[derive(serde::Deserialize)]
struct RawTokenInventory {
    lang_id: LangId,
    tokens: Vec<String>,
    blank_index: usize,
    #[serde(default = "default_marker")]
    space_marker: char,
}

#[cfg(feature = "serde")]
fn default_marker() -> char {
    DEFAULT_SPACE_MARKER
}

#[cfg(feature = "serde")]
impl TryFrom<RawTokenInventory> for TokenInventory {
    type Error = Error;

    fn try_from(raw: RawTokenInventory) -> Result<Self, Error> {
        TokenInventory::new(raw.lang_id, raw.tokens, raw.blank_index, Some(raw.space_marker))
    }
}

impl TokenInventory {
    /// `space_marker` defaults to `'_'` when `None`.
    pub fn new(
        lang_id: LangId,
        tokens: Vec<String>,
        blank_index: usize,
        space_marker: Option<char>,
    ) -> Result<Self, Error> {
        if tokens.len() < 2 {
            return Err(Error::InventoryTooSmall { len: tokens.len() });
        }
        let mut seen = BTreeSet::new();
        for token in &tokens {
            if !seen.insert(token.as_str()) {
                return Err(Error::DuplicateToken {
                    token: token.clone(),
                });
            }
        }
        if blank_index >= tokens.len() {
            return Err(Error::NoBlankToken {
                index: blank_index,
                len: tokens.len(),
            });
        }
        Ok(TokenInventory {
            lang_id,
            tokens,
            blank_index,
            space_marker: space_marker.unwrap_or(DEFAULT_SPACE_MARKER),
        })
    }

    pub fn lang_id(&self) -> &LangId {
        &self.lang_id
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn blank_index(&self) -> usize {
        self.blank_index
    }

    pub fn space_marker(&self) -> char {
        self.space_marker
    }

    /// Concatenates the named tokens and substitutes the space marker.
    pub fn detokenize(&self, indices: &[usize]) -> Result<String, Error> {
        let mut out = String::new();
        for &index in indices {
            let token = self.tokens.get(index).ok_or(Error::TokenIndexOutOfRange {
                index,
                len: self.tokens.len(),
            })?;
            out.push_str(token);
        }
        Ok(out.replace(self.space_marker, " "))
    }
}

/// One utterance entry in a corpus manifest.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CorpusRecord {
    pub utt_id: String,
    pub lang_id: LangId,
    /// Path to the feature file, relative to the manifest location.
    pub feature_file: String,
    pub transcript: String,
    pub duration_frames: usize,
}

/// An ordered list of corpus records with per-language utterance id
/// uniqueness.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusManifest {
    records: Vec<CorpusRecord>,
}

impl CorpusManifest {
    pub fn new(records: Vec<CorpusRecord>) -> Result<Self, Error> {
        let mut seen: BTreeSet<(&LangId, &str)> = BTreeSet::new();
        for record in &records {
            if !seen.insert((&record.lang_id, record.utt_id.as_str())) {
                return Err(Error::DuplicateUttId {
                    lang: record.lang_id.clone(),
                    utt_id: record.utt_id.clone(),
                });
            }
        }
        Ok(CorpusManifest { records })
    }

    pub fn records(&self) -> &[CorpusRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn languages(&self) -> BTreeSet<&LangId> {
        self.records.iter().map(|r| &r.lang_id).collect()
    }

    pub fn records_for<'a>(
        &'a self,
        lang: &'a LangId,
    ) -> impl Iterator<Item = &'a CorpusRecord> + 'a {
        self.records.iter().filter(move |r| &r.lang_id == lang)
    }
}

/// A posteriorgram: `frames` is `T x d`, every row stochastic within
/// [`SEQ_ROW_SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSequence {
    lang_id: LangId,
    utt_id: String,
    frames: Matrix,
}

impl PosteriorSequence {
    pub fn new(lang_id: LangId, utt_id: String, frames: Matrix) -> Result<Self, Error> {
        if frames.rows() == 0 {
            return Err(Error::Empty {
                what: "posterior sequence",
            });
        }
        if frames.cols() < 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                found: frames.cols(),
            });
        }
        for r in 0..frames.rows() {
            let row = frames.row(r);
            let mut sum = 0.0;
            for (index, &value) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&value) {
                    return Err(Error::NotAProbability { index, value });
                }
                sum += value;
            }
            if math::abs(sum - 1.0) > SEQ_ROW_SUM_TOLERANCE {
                return Err(Error::RowNotStochastic { row: r, sum });
            }
        }
        Ok(PosteriorSequence {
            lang_id,
            utt_id,
            frames,
        })
    }

    pub fn lang_id(&self) -> &LangId {
        &self.lang_id
    }

    pub fn utt_id(&self) -> &str {
        &self.utt_id
    }

    pub fn frames(&self) -> &Matrix {
        &self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.frames.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }
}

/// Sorted map from language id to its posterior dimensionality; this is the
/// encoder layout of a mapping model.
pub type SourceDims = BTreeMap<LangId, usize>;

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tokens(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn inventory_rejects_duplicates_and_bad_blank() {
        let err = TokenInventory::new(
            LangId::from("tam"),
            tokens(&["<blk>", "a", "a"]),
            0,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateToken { .. }));

        let err =
            TokenInventory::new(LangId::from("tam"), tokens(&["<blk>", "a"]), 5, None).unwrap_err();
        assert!(matches!(err, Error::NoBlankToken { .. }));

        let err = TokenInventory::new(LangId::from("tam"), tokens(&["x"]), 0, None).unwrap_err();
        assert!(matches!(err, Error::InventoryTooSmall { .. }));
    }

    #[test]
    fn detokenize_substitutes_marker() {
        let inv = TokenInventory::new(
            LangId::from("tam"),
            tokens(&["<blk>", "ka", "ri", "_"]),
            0,
            None,
        )
        .unwrap();
        assert_eq!(inv.detokenize(&[1, 3, 2]).unwrap(), "ka ri");
        assert_eq!(inv.detokenize(&[]).unwrap(), "");
        assert!(matches!(
            inv.detokenize(&[9]),
            Err(Error::TokenIndexOutOfRange { .. })
        ));
    }

    #[test]
    fn manifest_rejects_duplicate_utt_in_same_language() {
        let rec = |lang: &str, utt: &str| CorpusRecord {
            utt_id: utt.to_string(),
            lang_id: LangId::from(lang),
            feature_file: "f.xlft".to_string(),
            transcript: "ka".to_string(),
            duration_frames: 10,
        };
        assert!(CorpusManifest::new(vec![rec("tam", "u1"), rec("tel", "u1")]).is_ok());
        let err = CorpusManifest::new(vec![rec("tam", "u1"), rec("tam", "u1")]).unwrap_err();
        assert!(matches!(err, Error::DuplicateUttId { .. }));
    }

    #[test]
    fn posterior_sequence_validates_rows() {
        let good = Matrix::from_vec(2, 2, vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        let seq = PosteriorSequence::new(LangId::from("tam"), "u1".into(), good).unwrap();
        assert_eq!(seq.frame_count(), 2);
        assert_eq!(seq.num_classes(), 2);

        let bad = Matrix::from_vec(1, 2, vec![0.7, 0.4]).unwrap();
        assert!(matches!(
            PosteriorSequence::new(LangId::from("tam"), "u1".into(), bad),
            Err(Error::RowNotStochastic { row: 0, .. })
        ));

        let empty = Matrix::zeros(0, 3);
        assert!(PosteriorSequence::new(LangId::from("tam"), "u1".into(), empty).is_err());
    }

    #[test]
    fn sum_just_inside_tolerance_is_accepted() {
        let frames = Matrix::from_vec(1, 2, vec![0.50004, 0.5]).unwrap();
        assert!(PosteriorSequence::new(LangId::from("tam"), "u".into(), frames).is_ok());
        let frames = Matrix::from_vec(1, 2, vec![0.5002, 0.5]).unwrap();
        assert!(PosteriorSequence::new(LangId::from("tam"), "u".into(), frames).is_err());
    }
}
