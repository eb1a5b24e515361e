//! Greedy decoding, ciphering, and augmentation plan construction.
//!
//! Decoding is the standard collapse scheme for frame-synchronous token
//! posteriors: take the per-frame argmax, merge consecutive repeats, drop
//! blanks, then detokenise. A blank between two identical tokens therefore
//! separates genuine repeats: `[a, blank, a]` decodes to `aa` while
//! `[a, a, a]` decodes to `a`.
//!
//! Ciphering runs a source-language posteriorgram through the mapping model
//! and decodes the result in the target inventory, yielding target-script
//! text for foreign audio. An augmentation plan bundles such ciphered
//! utterances with the original target corpus, either for all sources
//! (`augAll`) or only the closest source by top-1 mapping accuracy
//! (`augTwo`).

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::corpus::{CorpusManifest, LangId, PosteriorSequence, TokenInventory};
use crate::error::Error;
use crate::evaluation::AccuracyReport;
use crate::mesd::MesdModel;
use crate::numerics::argmax;

/// Decoded token sequence for one utterance.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DecodeResult {
    pub utt_id: String,
    /// Token indices after collapsing repeats and removing blanks.
    pub indices: Vec<usize>,
    /// Detokenised text with space markers substituted.
    pub text: String,
}

/// Merges consecutive repeats and drops `blank` in one pass. Equivalent to
/// deduplicating adjacent frames first and filtering blanks second.
pub fn collapse_indices(frame_indices: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for &idx in frame_indices {
        if Some(idx) != prev && idx != blank {
            out.push(idx);
        }
        prev = Some(idx);
    }
    out
}

/// Per-frame argmax indices of a posteriorgram (ties to the lowest index).
pub fn frame_argmaxes(posteriors: &PosteriorSequence) -> Vec<usize> {
    (0..posteriors.frame_count())
        .map(|t| argmax(posteriors.row(t)).expect("posterior rows are non-empty and finite"))
        .collect()
}

/// Greedy decode: frame argmax, collapse, blank removal, detokenise.
pub fn greedy_decode(
    posteriors: &PosteriorSequence,
    inventory: &TokenInventory,
) -> Result<DecodeResult, Error> {
    if posteriors.num_classes() != inventory.size() {
        return Err(Error::DimensionMismatch {
            expected: inventory.size(),
            found: posteriors.num_classes(),
        });
    }
    let frames = frame_argmaxes(posteriors);
    let indices = collapse_indices(&frames, inventory.blank_index());
    let text = inventory.detokenize(&indices)?;
    Ok(DecodeResult {
        utt_id: posteriors.utt_id().to_string(),
        indices,
        text,
    })
}

/// A ciphered utterance: foreign audio rendered as target-language text.
#[derive(Debug, Clone, PartialEq)]
pub struct CipheredUtterance {
    pub utt_id: String,
    pub source_lang: LangId,
    /// Decoded text in the target inventory; may be empty.
    pub text: String,
    /// Decoded token indices backing `text`.
    pub indices: Vec<usize>,
    /// Per-frame argmax of the mapped posteriors, one label per input frame.
    /// These act as frame-level targets when retraining an acoustic model on
    /// the ciphered data.
    pub frame_labels: Vec<usize>,
}

impl CipheredUtterance {
    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

/// Maps one source utterance into the target space and decodes it.
pub fn cipher_utterance(
    model: &MesdModel,
    source_lang: &LangId,
    posteriors: &PosteriorSequence,
    target_inventory: &TokenInventory,
) -> Result<CipheredUtterance, Error> {
    if target_inventory.size() != model.target_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.target_dim(),
            found: target_inventory.size(),
        });
    }
    let mapped = model.forward(source_lang, posteriors)?;
    let decoded = greedy_decode(&mapped.sequence, target_inventory)?;
    let frame_labels = frame_argmaxes(&mapped.sequence);
    Ok(CipheredUtterance {
        utt_id: decoded.utt_id,
        source_lang: source_lang.clone(),
        text: decoded.text,
        indices: decoded.indices,
        frame_labels,
    })
}

/// Picks the source with the highest top-1 mapping accuracy; ties resolve to
/// the lexicographically smallest language id. All reports must share one
/// target language and carry an n=1 entry.
pub fn select_closest_language(reports: &[AccuracyReport]) -> Result<LangId, Error> {
    if reports.is_empty() {
        return Err(Error::Empty {
            what: "accuracy reports",
        });
    }
    let target = &reports[0].target_lang;
    let mut best: Option<(&LangId, f64)> = None;
    for report in reports {
        if &report.target_lang != target {
            return Err(Error::MixedTargets {
                first: target.clone(),
                other: report.target_lang.clone(),
            });
        }
        let acc = report
            .accuracy(1)
            .ok_or_else(|| Error::MissingAccuracy {
                lang: report.source_lang.clone(),
                n: 1,
            })?;
        best = match best {
            None => Some((&report.source_lang, acc)),
            Some((lang, top)) => {
                if acc > top || (acc == top && report.source_lang < *lang) {
                    Some((&report.source_lang, acc))
                } else {
                    Some((lang, top))
                }
            }
        };
    }
    Ok(best.expect("reports are non-empty").0.clone())
}

/// Which sources contribute ciphered data to an augmentation plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum AugmentationMode {
    /// Ciphered data from every source language.
    #[cfg_attr(feature = "serde", serde(rename = "augAll"))]
    AugAll,
    /// Ciphered data only from the closest source by top-1 accuracy.
    #[cfg_attr(feature = "serde", serde(rename = "augTwo"))]
    AugTwo,
}

/// Ciphered material for one source utterance, as fed into plan building.
#[derive(Debug, Clone, PartialEq)]
pub struct AugRecord {
    pub utt_id: String,
    /// Feature path of the source audio, relative to the plan location.
    pub feature_file: String,
    pub duration_frames: usize,
    /// Ciphered transcript in the target inventory.
    pub text: String,
}

/// One line of an augmentation plan: a corpus record plus provenance flags.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlanRecord {
    pub utt_id: String,
    pub lang_id: LangId,
    pub feature_file: String,
    pub transcript: String,
    pub duration_frames: usize,
    /// True when the transcript is ciphered rather than an original.
    pub ciphered: bool,
    /// Audio language of a ciphered record; none for originals.
    pub source_lang: Option<LangId>,
    /// True when the ciphered transcript came out empty. Such records stay
    /// in the plan (flagged) so consumers can decide whether to drop them.
    pub empty: bool,
}

/// Target originals plus ciphered source data, ready to retrain an acoustic
/// model.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPlan {
    pub target_lang: LangId,
    pub mode: AugmentationMode,
    /// The selected source under `augTwo`; none under `augAll`.
    pub closest_lang: Option<LangId>,
    pub records: Vec<PlanRecord>,
}

/// Builds the augmentation plan. Target originals come first in manifest
/// order, then ciphered blocks in ascending source language order (`augTwo`
/// keeps only the closest source, chosen from `reports`).
pub fn build_augmentation_plan(
    target_lang: &LangId,
    target_manifest: &CorpusManifest,
    ciphered: &BTreeMap<LangId, Vec<AugRecord>>,
    mode: AugmentationMode,
    reports: &[AccuracyReport],
) -> Result<AugmentationPlan, Error> {
    if target_manifest.is_empty() {
        return Err(Error::Empty {
            what: "target manifest",
        });
    }
    if ciphered.is_empty() {
        return Err(Error::Empty {
            what: "ciphered sources",
        });
    }
    let closest = match mode {
        AugmentationMode::AugAll => None,
        AugmentationMode::AugTwo => {
            for lang in ciphered.keys() {
                if !reports.iter().any(|r| &r.source_lang == lang) {
                    return Err(Error::MissingAccuracy {
                        lang: lang.clone(),
                        n: 1,
                    });
                }
            }
            let lang = select_closest_language(reports)?;
            if !ciphered.contains_key(&lang) {
                return Err(Error::MissingSource {
                    lang,
                    utt_id: String::new(),
                });
            }
            Some(lang)
        }
    };
    let mut records: Vec<PlanRecord> = Vec::new();
    for rec in target_manifest.records_for(target_lang) {
        records.push(PlanRecord {
            utt_id: rec.utt_id.clone(),
            lang_id: rec.lang_id.clone(),
            feature_file: rec.feature_file.clone(),
            transcript: rec.transcript.clone(),
            duration_frames: rec.duration_frames,
            ciphered: false,
            source_lang: None,
            empty: rec.transcript.is_empty(),
        });
    }
    if records.is_empty() {
        return Err(Error::Empty {
            what: "target records in manifest",
        });
    }
    for (lang, utts) in ciphered {
        if let Some(ref only) = closest {
            if lang != only {
                continue;
            }
        }
        for utt in utts {
            records.push(PlanRecord {
                utt_id: utt.utt_id.clone(),
                lang_id: lang.clone(),
                feature_file: utt.feature_file.clone(),
                transcript: utt.text.clone(),
                duration_frames: utt.duration_frames,
                ciphered: true,
                source_lang: Some(lang.clone()),
                empty: utt.text.is_empty(),
            });
        }
    }
    Ok(AugmentationPlan {
        target_lang: target_lang.clone(),
        mode,
        closest_lang: closest,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusRecord;
    use crate::numerics::Matrix;
    use alloc::vec;

    fn inv(lang: &str) -> TokenInventory {
        TokenInventory::new(
            LangId::from(lang),
            vec!["<blk>".into(), "a".into(), "b".into(), "_".into()],
            0,
            None,
        )
        .unwrap()
    }

    fn one_hot_seq(lang: &str, indices: &[usize], d: usize) -> PosteriorSequence {
        let mut frames = Matrix::zeros(indices.len(), d);
        for (t, &idx) in indices.iter().enumerate() {
            frames.row_mut(t)[idx] = 1.0;
        }
        PosteriorSequence::new(LangId::from(lang), "u".into(), frames).unwrap()
    }

    #[test]
    fn collapse_hand_cases() {
        // blank = 0
        assert_eq!(collapse_indices(&[1, 1, 0, 2, 2], 0), vec![1, 2]);
        assert_eq!(collapse_indices(&[0, 0, 0], 0), vec![]);
        assert_eq!(collapse_indices(&[1, 0, 1], 0), vec![1, 1]);
        assert_eq!(collapse_indices(&[], 0), vec![]);
        assert_eq!(collapse_indices(&[2, 2, 2], 0), vec![2]);
    }

    #[test]
    fn greedy_decode_roundtrips_one_hot() {
        let inventory = inv("tgt");
        // a a blk b b -> "ab"
        let seq = one_hot_seq("tgt", &[1, 1, 0, 2, 2], 4);
        let out = greedy_decode(&seq, &inventory).unwrap();
        assert_eq!(out.text, "ab");
        assert_eq!(out.indices, vec![1, 2]);

        // Blank separates repeats: a blk a -> "aa".
        let seq = one_hot_seq("tgt", &[1, 0, 1], 4);
        assert_eq!(greedy_decode(&seq, &inventory).unwrap().text, "aa");

        // All blank decodes to empty text.
        let seq = one_hot_seq("tgt", &[0, 0], 4);
        let out = greedy_decode(&seq, &inventory).unwrap();
        assert_eq!(out.text, "");
        assert!(out.indices.is_empty());

        // Marker becomes a space.
        let seq = one_hot_seq("tgt", &[1, 3, 2], 4);
        assert_eq!(greedy_decode(&seq, &inventory).unwrap().text, "a b");
    }

    #[test]
    fn greedy_decode_checks_inventory_size() {
        let seq = one_hot_seq("tgt", &[1], 4);
        let small = TokenInventory::new(
            LangId::from("tgt"),
            vec!["<blk>".into(), "a".into()],
            0,
            None,
        )
        .unwrap();
        assert!(matches!(
            greedy_decode(&seq, &small),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn report(target: &str, source: &str, top1: f64) -> AccuracyReport {
        AccuracyReport {
            target_lang: LangId::from(target),
            source_lang: LangId::from(source),
            per_n: [(1usize, top1)].into_iter().collect(),
            correct: [(1usize, 0)].into_iter().collect(),
            total_frames: 100,
        }
    }

    #[test]
    fn closest_language_picks_highest_top1() {
        let reports = [
            report("jav", "tam", 0.6224),
            report("jav", "tel", 0.5464),
            report("jav", "ceb", 0.6551),
        ];
        assert_eq!(select_closest_language(&reports).unwrap(), LangId::from("ceb"));
    }

    #[test]
    fn closest_language_tie_breaks_lexicographically() {
        let reports = [report("t", "bbb", 0.5), report("t", "aaa", 0.5)];
        assert_eq!(select_closest_language(&reports).unwrap(), LangId::from("aaa"));
    }

    #[test]
    fn closest_language_rejects_mixed_targets() {
        let reports = [report("t1", "a", 0.5), report("t2", "b", 0.6)];
        assert!(matches!(
            select_closest_language(&reports),
            Err(Error::MixedTargets { .. })
        ));
        assert!(select_closest_language(&[]).is_err());
    }

    fn target_manifest(lang: &str, n: usize) -> CorpusManifest {
        let records = (0..n)
            .map(|i| CorpusRecord {
                utt_id: alloc::format!("u{i}"),
                lang_id: LangId::from(lang),
                feature_file: alloc::format!("{lang}/features/u{i}.xlft"),
                transcript: "ab".into(),
                duration_frames: 12,
            })
            .collect();
        CorpusManifest::new(records).unwrap()
    }

    fn aug(lang: &str, n: usize, empty_first: bool) -> Vec<AugRecord> {
        (0..n)
            .map(|i| AugRecord {
                utt_id: alloc::format!("u{i}"),
                feature_file: alloc::format!("{lang}/features/u{i}.xlft"),
                duration_frames: 9,
                text: if empty_first && i == 0 {
                    String::new()
                } else {
                    "ba".into()
                },
            })
            .collect()
    }

    #[test]
    fn plan_aug_all_keeps_every_source_in_order() {
        let tgt = LangId::from("tgt");
        let ciphered: BTreeMap<LangId, Vec<AugRecord>> = [
            (LangId::from("s2"), aug("s2", 2, false)),
            (LangId::from("s1"), aug("s1", 3, true)),
        ]
        .into_iter()
        .collect();
        let plan = build_augmentation_plan(
            &tgt,
            &target_manifest("tgt", 4),
            &ciphered,
            AugmentationMode::AugAll,
            &[],
        )
        .unwrap();
        assert_eq!(plan.records.len(), 4 + 3 + 2);
        assert!(plan.closest_lang.is_none());
        // Originals first, then s1 block, then s2 block.
        assert!(plan.records[..4].iter().all(|r| !r.ciphered));
        assert!(plan.records[4..7]
            .iter()
            .all(|r| r.source_lang == Some(LangId::from("s1"))));
        assert!(plan.records[7..]
            .iter()
            .all(|r| r.source_lang == Some(LangId::from("s2"))));
        // The empty ciphered transcript is flagged, not dropped.
        assert!(plan.records[4].empty);
        assert_eq!(plan.records.iter().filter(|r| r.empty).count(), 1);
    }

    #[test]
    fn plan_aug_two_keeps_only_closest() {
        let tgt = LangId::from("tgt");
        let ciphered: BTreeMap<LangId, Vec<AugRecord>> = [
            (LangId::from("s1"), aug("s1", 3, false)),
            (LangId::from("s2"), aug("s2", 2, false)),
        ]
        .into_iter()
        .collect();
        let reports = [report("tgt", "s1", 0.4), report("tgt", "s2", 0.7)];
        let plan = build_augmentation_plan(
            &tgt,
            &target_manifest("tgt", 4),
            &ciphered,
            AugmentationMode::AugTwo,
            &reports,
        )
        .unwrap();
        assert_eq!(plan.closest_lang, Some(LangId::from("s2")));
        assert_eq!(plan.records.len(), 4 + 2);
        assert!(plan.records[4..]
            .iter()
            .all(|r| r.source_lang == Some(LangId::from("s2"))));
    }

    #[test]
    fn plan_aug_two_requires_reports_for_every_source() {
        let tgt = LangId::from("tgt");
        let ciphered: BTreeMap<LangId, Vec<AugRecord>> =
            [(LangId::from("s1"), aug("s1", 1, false))].into_iter().collect();
        let err = build_augmentation_plan(
            &tgt,
            &target_manifest("tgt", 1),
            &ciphered,
            AugmentationMode::AugTwo,
            &[],
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingAccuracy { .. }));
    }
}
