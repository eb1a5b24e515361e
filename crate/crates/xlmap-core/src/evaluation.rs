//! Evaluation: top-n mapping accuracy and character error rate.
//!
//! Mapping accuracy counts a frame as correct when the target posterior's
//! argmax appears among the top n classes of the mapped posterior, so
//! accuracy is nondecreasing in n and reaches 1 at n equal to the class
//! count. CER is micro-averaged: total edit distance over total reference
//! characters, across all utterances.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::corpus::{LangId, PosteriorSequence, TokenInventory};
use crate::decode::greedy_decode;
use crate::error::Error;
use crate::mesd::{MappedPosteriors, MesdModel};
use crate::numerics::{argmax, levenshtein, top_rank};

/// Top-n mapping accuracy of one (source, target) pair.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AccuracyReport {
    pub target_lang: LangId,
    pub source_lang: LangId,
    /// Fraction of frames whose target argmax lies in the mapped top n,
    /// keyed by n.
    pub per_n: BTreeMap<usize, f64>,
    /// Raw correct-frame counts, keyed by n.
    pub correct: BTreeMap<usize, usize>,
    pub total_frames: usize,
}

impl AccuracyReport {
    pub fn accuracy(&self, n: usize) -> Option<f64> {
        self.per_n.get(&n).copied()
    }
}

/// Counts frames whose target argmax lands in the mapped top-n, for each
/// requested n. `mapped` and `target` pair up positionally and must be
/// frame-aligned with matching class counts.
pub fn mapping_accuracy(
    mapped: &[MappedPosteriors],
    target: &[PosteriorSequence],
    ns: &[usize],
) -> Result<AccuracyReport, Error> {
    if mapped.len() != target.len() {
        return Err(Error::LengthMismatch {
            left: mapped.len(),
            right: target.len(),
        });
    }
    if mapped.is_empty() {
        return Err(Error::Empty {
            what: "posterior stream",
        });
    }
    if ns.is_empty() {
        return Err(Error::Empty { what: "top-n list" });
    }
    let d = mapped[0].sequence.num_classes();
    for &n in ns {
        if n == 0 || n > d {
            return Err(Error::TopNOutOfRange { n, len: d });
        }
    }
    let mut correct: BTreeMap<usize, usize> = ns.iter().map(|&n| (n, 0)).collect();
    let mut total_frames = 0usize;
    for (m, t) in mapped.iter().zip(target) {
        if m.sequence.num_classes() != t.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: m.sequence.num_classes(),
                found: t.num_classes(),
            });
        }
        if m.sequence.frame_count() != t.frame_count() {
            return Err(Error::FrameCountMismatch {
                expected: m.sequence.frame_count(),
                found: t.frame_count(),
            });
        }
        for frame in 0..t.frame_count() {
            let want = argmax(t.row(frame))?;
            // Rank of the wanted class in the mapped ordering; inside the
            // top n exactly when rank < n.
            let rank = top_rank(m.sequence.row(frame), want);
            for (&n, hits) in correct.iter_mut() {
                if rank < n {
                    *hits += 1;
                }
            }
            total_frames += 1;
        }
    }
    let per_n = correct
        .iter()
        .map(|(&n, &hits)| (n, hits as f64 / total_frames as f64))
        .collect();
    Ok(AccuracyReport {
        target_lang: mapped[0].sequence.lang_id().clone(),
        source_lang: mapped[0].source_lang.clone(),
        per_n,
        correct,
        total_frames,
    })
}

/// Micro-averaged character error rate.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CerReport {
    pub lang: LangId,
    pub utterances: usize,
    pub ref_chars: usize,
    pub edits: usize,
    /// `edits / ref_chars`; see [`CerReport::percent`] for the conventional
    /// percentage form. Can exceed 1 when hypotheses run long.
    pub cer: f64,
}

impl CerReport {
    pub fn percent(&self) -> f64 {
        100.0 * self.cer
    }
}

/// CER of `hyps` against `refs`, paired positionally. Every reference must
/// be non-empty.
pub fn cer<S: AsRef<str>>(lang: &LangId, refs: &[S], hyps: &[S]) -> Result<CerReport, Error> {
    if refs.len() != hyps.len() {
        return Err(Error::LengthMismatch {
            left: refs.len(),
            right: hyps.len(),
        });
    }
    if refs.is_empty() {
        return Err(Error::Empty {
            what: "reference list",
        });
    }
    let mut ref_chars = 0usize;
    let mut edits = 0usize;
    for (index, (r, h)) in refs.iter().zip(hyps).enumerate() {
        let r: Vec<char> = r.as_ref().chars().collect();
        if r.is_empty() {
            return Err(Error::EmptyReference { index });
        }
        let h: Vec<char> = h.as_ref().chars().collect();
        ref_chars += r.len();
        edits += levenshtein(&r, &h);
    }
    Ok(CerReport {
        lang: lang.clone(),
        utterances: refs.len(),
        ref_chars,
        edits,
        cer: edits as f64 / ref_chars as f64,
    })
}

/// Maps source posteriors through `model`, greedy-decodes the result in the
/// target inventory, and scores CER against the paired references.
pub fn cross_lingual_eval(
    model: &MesdModel,
    source_lang: &LangId,
    sources: &[PosteriorSequence],
    refs: &[String],
    inventory: &TokenInventory,
) -> Result<CerReport, Error> {
    if sources.len() != refs.len() {
        return Err(Error::LengthMismatch {
            left: sources.len(),
            right: refs.len(),
        });
    }
    if inventory.size() != model.target_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.target_dim(),
            found: inventory.size(),
        });
    }
    let mut hyps = Vec::with_capacity(sources.len());
    for seq in sources {
        let mapped = model.forward(source_lang, seq)?;
        hyps.push(greedy_decode(&mapped.sequence, inventory)?.text);
    }
    cer(model.target_lang(), refs, &hyps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use alloc::vec;

    fn seq(lang: &str, rows: Vec<Vec<f64>>) -> PosteriorSequence {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let frames = Matrix::from_vec(rows.len(), d, flat).unwrap();
        PosteriorSequence::new(LangId::from(lang), "u".into(), frames).unwrap()
    }

    fn mapped(lang: &str, source: &str, rows: Vec<Vec<f64>>) -> MappedPosteriors {
        MappedPosteriors {
            sequence: seq(lang, rows),
            source_lang: LangId::from(source),
            model_checksum: 0,
        }
    }

    #[test]
    fn accuracy_identity_stream_is_one() {
        let rows = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1]];
        let m = mapped("tgt", "src", rows.clone());
        let t = seq("tgt", rows);
        let rep = mapping_accuracy(&[m], &[t], &[1, 2, 3]).unwrap();
        assert_eq!(rep.accuracy(1), Some(1.0));
        assert_eq!(rep.accuracy(3), Some(1.0));
        assert_eq!(rep.total_frames, 2);
    }

    #[test]
    fn accuracy_counts_top_n_membership() {
        // Target argmax is class 0 in every one of four frames; the mapped
        // posterior puts class 0 first in three of them, second in one.
        let target = seq(
            "tgt",
            vec![
                vec![0.9, 0.05, 0.05],
                vec![0.9, 0.05, 0.05],
                vec![0.9, 0.05, 0.05],
                vec![0.9, 0.05, 0.05],
            ],
        );
        let m = mapped(
            "tgt",
            "src",
            vec![
                vec![0.8, 0.1, 0.1],
                vec![0.6, 0.3, 0.1],
                vec![0.5, 0.25, 0.25],
                vec![0.2, 0.7, 0.1],
            ],
        );
        let rep = mapping_accuracy(&[m], &[target], &[1, 2, 3]).unwrap();
        assert_eq!(rep.accuracy(1), Some(0.75));
        assert_eq!(rep.accuracy(2), Some(1.0));
        assert_eq!(rep.correct[&1], 3);
    }

    #[test]
    fn accuracy_rejects_mismatches() {
        let t = seq("tgt", vec![vec![0.5, 0.5]]);
        let m = mapped("tgt", "src", vec![vec![0.5, 0.5]]);
        assert!(matches!(
            mapping_accuracy(core::slice::from_ref(&m), &[], &[1]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            mapping_accuracy(&[m], &[t], &[5]),
            Err(Error::TopNOutOfRange { .. })
        ));
    }

    #[test]
    fn cer_hand_cases() {
        let lang = LangId::from("tgt");
        let rep = cer(&lang, &["abc"], &["abc"]).unwrap();
        assert_eq!(rep.cer, 0.0);
        assert_eq!(rep.percent(), 0.0);

        let rep = cer(&lang, &["abc"], &["abd"]).unwrap();
        assert!((rep.percent() - 100.0 / 3.0).abs() < 1e-9);

        // Micro average: (1 + 1) edits over (3 + 5) chars = 25%.
        let rep = cer(&lang, &["abc", "hello"], &["ab", "hellp"]).unwrap();
        assert_eq!(rep.edits, 2);
        assert_eq!(rep.ref_chars, 8);
        assert!((rep.percent() - 25.0).abs() < 1e-9);
    }

    #[test]
    fn cer_rejects_empty_reference_and_length_mismatch() {
        let lang = LangId::from("tgt");
        assert!(matches!(
            cer(&lang, &[""], &["x"]),
            Err(Error::EmptyReference { index: 0 })
        ));
        assert!(matches!(
            cer(&lang, &["a"], &[]),
            Err(Error::LengthMismatch { .. })
        ));
        let empty: [&str; 0] = [];
        assert!(matches!(
            cer(&lang, &empty, &empty),
            Err(Error::Empty { .. })
        ));
    }

    #[test]
    fn cer_above_one_when_hypothesis_runs_long() {
        let lang = LangId::from("tgt");
        let rep = cer(&lang, &["ab"], &["wxyz"]).unwrap();
        assert!(rep.cer > 1.0);
    }
}
