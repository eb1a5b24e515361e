//! Pipelines over an on-disk corpus root.
//!
//! A corpus root is laid out as:
//!
//! ```text
//! root/<lang>/manifest.jsonl          training utterances
//! root/<lang>/eval_manifest.jsonl     held-out utterances
//! root/<lang>/inventory.jsonl         token inventory (single line)
//! root/<lang>/frame_labels.jsonl      per-frame reference labels, train
//! root/<lang>/eval_frame_labels.jsonl per-frame reference labels, eval
//! root/<lang>/features/<utt>.xlft     acoustic features
//! root/models/toy_am_<lang>.json      frame classifier per language
//! root/models/toy_am_metrics.json     holdout accuracy per language
//! root/posteriors/<split>/<audio>/<am>/<utt>.xlpo
//! ```
//!
//! The posterior tree is keyed by audio language first and decoding model
//! second, so `posteriors/train/alfa/brav/` holds `alfa` speech heard through
//! the `brav` recogniser. Mapping models train on the target language's audio
//! row and cipher from a source language's diagonal entry.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use xlmap_core::corpus::{CorpusManifest, CorpusRecord, LangId, PosteriorSequence, TokenInventory};
use xlmap_core::decode::{
    build_augmentation_plan, cipher_utterance, greedy_decode, AugRecord, AugmentationMode,
    AugmentationPlan,
};
use xlmap_core::evaluation::{cer, mapping_accuracy, AccuracyReport, CerReport};
use xlmap_core::mesd::{MappedPosteriors, MesdModel};
use xlmap_core::training::PairedUtterance;

use crate::error::{Error, Result};
use crate::manifest::{
    load_manifest, read_json, read_jsonl, write_json, write_jsonl, CipheredRecord,
    FrameLabelRecord, PlanLabelRecord, PlanMeta,
};
use crate::synth::{
    generate_split, train_toy_am, SynthLanguageSpec, ToyAcousticModel, ToyAmOptions,
};
use crate::xlpo::{load_features, load_posteriors, save_posteriors, FeatureSequence};

/// Which half of the corpus to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    pub fn manifest_name(self) -> &'static str {
        match self {
            Split::Train => "manifest.jsonl",
            Split::Eval => "eval_manifest.jsonl",
        }
    }

    pub fn labels_name(self) -> &'static str {
        match self {
            Split::Train => "frame_labels.jsonl",
            Split::Eval => "eval_frame_labels.jsonl",
        }
    }
}

pub fn lang_dir(root: &Path, lang: &LangId) -> PathBuf {
    root.join(lang.as_str())
}

pub fn manifest_path(root: &Path, lang: &LangId, split: Split) -> PathBuf {
    lang_dir(root, lang).join(split.manifest_name())
}

pub fn inventory_path(root: &Path, lang: &LangId) -> PathBuf {
    lang_dir(root, lang).join("inventory.jsonl")
}

pub fn labels_path(root: &Path, lang: &LangId, split: Split) -> PathBuf {
    lang_dir(root, lang).join(split.labels_name())
}

pub fn toy_am_path(root: &Path, lang: &LangId) -> PathBuf {
    root.join("models").join(format!("toy_am_{lang}.json"))
}

/// `root/posteriors/<split>/<audio>/<am>/<utt>.xlpo`.
pub fn posterior_path(
    root: &Path,
    split: Split,
    audio_lang: &LangId,
    am_lang: &LangId,
    utt_id: &str,
) -> PathBuf {
    root.join("posteriors")
        .join(split.dir_name())
        .join(audio_lang.as_str())
        .join(am_lang.as_str())
        .join(format!("{utt_id}.xlpo"))
}

fn load_posteriors_for(path: &Path, utt_id: &str) -> Result<PosteriorSequence> {
    match load_posteriors(path) {
        Err(Error::MissingFile { path }) => Err(Error::MissingPosterior {
            utt_id: utt_id.to_string(),
            path,
        }),
        other => other,
    }
}

/// Maps items to results on `jobs` threads, preserving input order. With one
/// job it degenerates to a plain map, and the outputs are identical either
/// way because every item is processed independently.
pub fn par_map_ordered<T, R, F>(items: Vec<T>, jobs: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let jobs = jobs.max(1);
    if jobs == 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let chunk_size = items.len().div_ceil(jobs);
    let mut chunks: Vec<Vec<T>> = Vec::new();
    let mut items = items;
    while !items.is_empty() {
        let rest = items.split_off(items.len().min(chunk_size));
        chunks.push(std::mem::replace(&mut items, rest));
    }
    let f = &f;
    let nested: Vec<Vec<R>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| scope.spawn(move || chunk.into_iter().map(f).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    nested.into_iter().flatten().collect()
}

/// Lexically resolves `.` and `..` against the current directory.
pub fn absolutize(path: &Path) -> PathBuf {
    let joined = if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir()
            .unwrap_or_else(|_| PathBuf::from("."))
            .join(path)
    };
    let mut out = PathBuf::new();
    for comp in joined.components() {
        match comp {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    out
}

/// Lexical relative path from `base` (a directory) to `target`.
pub fn relative_from(base: &Path, target: &Path) -> PathBuf {
    let base = absolutize(base);
    let target = absolutize(target);
    let base_comps: Vec<Component> = base.components().collect();
    let target_comps: Vec<Component> = target.components().collect();
    let common = base_comps
        .iter()
        .zip(&target_comps)
        .take_while(|(a, b)| a == b)
        .count();
    let mut out = PathBuf::new();
    for _ in common..base_comps.len() {
        out.push("..");
    }
    for comp in &target_comps[common..] {
        out.push(comp);
    }
    if out.as_os_str().is_empty() {
        out.push(".");
    }
    out
}

/// Loads the target language's split with its posteriors under every listed
/// model language, paired frame-for-frame.
pub fn load_paired_corpus(
    root: &Path,
    target: &LangId,
    sources: &[LangId],
    split: Split,
) -> Result<Vec<PairedUtterance>> {
    let loaded = load_manifest(manifest_path(root, target, split))?;
    let mut out = Vec::new();
    for rec in loaded.manifest.records_for(target) {
        let target_seq = load_posteriors_for(
            &posterior_path(root, split, target, target, &rec.utt_id),
            &rec.utt_id,
        )?;
        let mut source_map = BTreeMap::new();
        for source in sources {
            let seq = load_posteriors_for(
                &posterior_path(root, split, target, source, &rec.utt_id),
                &rec.utt_id,
            )?;
            source_map.insert(source.clone(), seq);
        }
        out.push(PairedUtterance::new(
            rec.utt_id.clone(),
            target_seq,
            source_map,
        )?);
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "no {} utterances for language {target}",
            split.dir_name()
        )));
    }
    Ok(out)
}

/// Top-n accuracy of the model on a split, one report per encoder language.
pub fn eval_mapping(
    root: &Path,
    model: &MesdModel,
    split: Split,
    ns: &[usize],
) -> Result<Vec<AccuracyReport>> {
    let sources: Vec<LangId> = model.encoder_langs().cloned().collect();
    let corpus = load_paired_corpus(root, model.target_lang(), &sources, split)?;
    let targets: Vec<PosteriorSequence> = corpus.iter().map(|u| u.target.clone()).collect();
    let mut reports = Vec::new();
    for source in &sources {
        let mapped: Vec<MappedPosteriors> = corpus
            .iter()
            .map(|u| model.forward(source, &u.sources[source]))
            .collect::<std::result::Result<_, _>>()?;
        reports.push(mapping_accuracy(&mapped, &targets, ns)?);
    }
    Ok(reports)
}

/// Accuracy of the identity mapping: the target posteriors scored against
/// themselves. Every requested n must come out at exactly 1, which pins the
/// scoring path end to end.
pub fn identity_eval(
    root: &Path,
    target: &LangId,
    split: Split,
    ns: &[usize],
) -> Result<AccuracyReport> {
    let corpus = load_paired_corpus(root, target, std::slice::from_ref(target), split)?;
    let targets: Vec<PosteriorSequence> = corpus.iter().map(|u| u.target.clone()).collect();
    let mapped: Vec<MappedPosteriors> = targets
        .iter()
        .map(|seq| MappedPosteriors {
            sequence: seq.clone(),
            source_lang: target.clone(),
            model_checksum: 0,
        })
        .collect();
    mapping_accuracy(&mapped, &targets, ns).map_err(Error::from)
}

/// Ciphers one source language's split into the target token space. Feature
/// paths in the output are relative to `root`, so the records stay valid
/// wherever the ciphered file itself is written.
pub fn cipher_split(
    root: &Path,
    model: &MesdModel,
    source_lang: &LangId,
    inventory: &TokenInventory,
    split: Split,
) -> Result<Vec<CipheredRecord>> {
    let loaded = load_manifest(manifest_path(root, source_lang, split))?;
    let mut out = Vec::new();
    for rec in loaded.manifest.records_for(source_lang) {
        let seq = load_posteriors_for(
            &posterior_path(root, split, source_lang, source_lang, &rec.utt_id),
            &rec.utt_id,
        )?;
        let ciphered = cipher_utterance(model, source_lang, &seq, inventory)?;
        out.push(CipheredRecord {
            utt_id: ciphered.utt_id,
            source_lang: source_lang.clone(),
            target_lang: model.target_lang().clone(),
            feature_file: format!("{}/{}", source_lang, rec.feature_file),
            duration_frames: rec.duration_frames,
            text: ciphered.text.clone(),
            empty: ciphered.text.is_empty(),
            frame_labels: ciphered.frame_labels,
        });
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "no {} utterances for language {source_lang}",
            split.dir_name()
        )));
    }
    Ok(out)
}

/// Decodes a split's audio through a frame classifier and scores CER against
/// the manifest transcripts.
pub fn toy_am_cer(
    root: &Path,
    am: &ToyAcousticModel,
    lang: &LangId,
    inventory: &TokenInventory,
    split: Split,
) -> Result<CerReport> {
    let loaded = load_manifest(manifest_path(root, lang, split))?;
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    for rec in loaded.manifest.records_for(lang) {
        let features = load_features(loaded.resolve(rec))?;
        let probs = am.posteriors(&features)?;
        hyps.push(greedy_decode(&probs, inventory)?.text);
        refs.push(rec.transcript.clone());
    }
    cer(lang, &refs, &hyps).map_err(Error::from)
}

/// Everything `assemble_plan` writes, echoed back for callers.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub plan: AugmentationPlan,
    pub plan_file: PathBuf,
    pub meta_file: PathBuf,
    pub labels_file: PathBuf,
}

/// Builds an augmentation plan from ciphered records and writes it under
/// `out_dir` as `plan.jsonl` (one corpus record per line, feature paths
/// relative to `out_dir`), `plan_meta.json` and `plan_labels.jsonl`.
pub fn assemble_plan(
    root: &Path,
    target: &LangId,
    ciphered: &BTreeMap<LangId, Vec<CipheredRecord>>,
    mode: AugmentationMode,
    reports: &[AccuracyReport],
    out_dir: &Path,
) -> Result<PlanOutcome> {
    let target_dir = lang_dir(root, target);
    let loaded = load_manifest(manifest_path(root, target, Split::Train))?;
    let original_labels: Vec<FrameLabelRecord> =
        read_jsonl(labels_path(root, target, Split::Train))?;
    let label_of: BTreeMap<&str, &FrameLabelRecord> = original_labels
        .iter()
        .map(|l| (l.utt_id.as_str(), l))
        .collect();

    // Rebase every feature path onto the plan directory so the plan can be
    // read back as an ordinary manifest.
    let rebased: Vec<CorpusRecord> = loaded
        .manifest
        .records()
        .iter()
        .map(|rec| {
            let abs = target_dir.join(&rec.feature_file);
            CorpusRecord {
                feature_file: relative_from(out_dir, &abs).to_string_lossy().into_owned(),
                ..rec.clone()
            }
        })
        .collect();
    let rebased = CorpusManifest::new(rebased)?;

    let mut aug: BTreeMap<LangId, Vec<AugRecord>> = BTreeMap::new();
    for (lang, records) in ciphered {
        let entries = records
            .iter()
            .map(|c| AugRecord {
                utt_id: c.utt_id.clone(),
                feature_file: relative_from(out_dir, &root.join(&c.feature_file))
                    .to_string_lossy()
                    .into_owned(),
                duration_frames: c.duration_frames,
                text: c.text.clone(),
            })
            .collect();
        aug.insert(lang.clone(), entries);
    }

    let plan = build_augmentation_plan(target, &rebased, &aug, mode, reports)?;

    // One label line per plan record, in plan order.
    let mut labels = Vec::with_capacity(plan.records.len());
    for rec in &plan.records {
        if rec.ciphered {
            let source = rec.source_lang.as_ref().expect("ciphered records carry a source");
            let c = ciphered[source]
                .iter()
                .find(|c| c.utt_id == rec.utt_id)
                .expect("plan records come from the ciphered input");
            labels.push(PlanLabelRecord {
                utt_id: rec.utt_id.clone(),
                lang_id: rec.lang_id.clone(),
                labels: c.frame_labels.clone(),
            });
        } else {
            let l = label_of.get(rec.utt_id.as_str()).ok_or_else(|| {
                Error::malformed(
                    labels_path(root, target, Split::Train),
                    format!("no frame labels for utterance {:?}", rec.utt_id),
                )
            })?;
            labels.push(PlanLabelRecord {
                utt_id: rec.utt_id.clone(),
                lang_id: rec.lang_id.clone(),
                labels: l.labels.clone(),
            });
        }
    }

    let plan_file = out_dir.join("plan.jsonl");
    let meta_file = out_dir.join("plan_meta.json");
    let labels_file = out_dir.join("plan_labels.jsonl");
    write_jsonl(&plan_file, &plan.records)?;
    write_json(
        &meta_file,
        &PlanMeta {
            target_lang: plan.target_lang.clone(),
            mode: plan.mode,
            closest_lang: plan.closest_lang.clone(),
        },
    )?;
    write_jsonl(&labels_file, &labels)?;
    Ok(PlanOutcome {
        plan,
        plan_file,
        meta_file,
        labels_file,
    })
}

/// Feature sequences paired with per-frame labels, ready for
/// [`train_toy_am`].
pub type LabelledFeatures = Vec<(FeatureSequence, Vec<usize>)>;

/// Reads a plan directory back into toy-model training data, dropping
/// records whose ciphered transcript came out empty.
pub fn assemble_plan_training_data(plan_dir: &Path) -> Result<(PlanMeta, LabelledFeatures)> {
    let meta: PlanMeta = read_json(plan_dir.join("plan_meta.json"))?;
    let records: Vec<xlmap_core::decode::PlanRecord> = read_jsonl(plan_dir.join("plan.jsonl"))?;
    let labels: Vec<PlanLabelRecord> = read_jsonl(plan_dir.join("plan_labels.jsonl"))?;
    let label_of: BTreeMap<(&LangId, &str), &PlanLabelRecord> = labels
        .iter()
        .map(|l| ((&l.lang_id, l.utt_id.as_str()), l))
        .collect();
    let mut out = Vec::new();
    for rec in &records {
        if rec.empty {
            continue;
        }
        let label = label_of
            .get(&(&rec.lang_id, rec.utt_id.as_str()))
            .ok_or_else(|| {
                Error::malformed(
                    plan_dir.join("plan_labels.jsonl"),
                    format!("no labels for {} utterance {:?}", rec.lang_id, rec.utt_id),
                )
            })?;
        let features = load_features(plan_dir.join(&rec.feature_file))?;
        if features.num_frames() != label.labels.len() {
            return Err(Error::malformed(
                plan_dir.join("plan.jsonl"),
                format!(
                    "utterance {:?} has {} frames but {} labels",
                    rec.utt_id,
                    features.num_frames(),
                    label.labels.len()
                ),
            ));
        }
        out.push((features, label.labels.clone()));
    }
    if out.is_empty() {
        return Err(Error::Config("plan holds no usable records".into()));
    }
    Ok((meta, out))
}

/// Holdout accuracy of one language's frame classifier, as written next to
/// the models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyAmMetric {
    pub lang: LangId,
    pub holdout_accuracy: f64,
    pub holdout_utts: usize,
}

/// What [`synthesize_corpus`] produced.
#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub languages: Vec<LangId>,
    pub train_utts: usize,
    pub eval_utts: usize,
    pub metrics: Vec<ToyAmMetric>,
}

/// Generates the full demo corpus under `root`: features, manifests,
/// inventories, frame labels, one toy acoustic model per language, and every
/// audio-language-by-model-language posterior combination for both splits.
pub fn synthesize_corpus(
    root: &Path,
    specs: &[SynthLanguageSpec],
    train_utts: usize,
    eval_utts: usize,
    frame_range: &std::ops::Range<usize>,
    am_opts: &ToyAmOptions,
    jobs: usize,
) -> Result<SynthOutcome> {
    if specs.is_empty() {
        return Err(Error::Config("no languages to synthesize".into()));
    }
    if train_utts < 2 || eval_utts == 0 {
        return Err(Error::Config(
            "need at least two training and one eval utterance".into(),
        ));
    }
    if frame_range.start == 0 || frame_range.end <= frame_range.start {
        return Err(Error::Config("frame range must be non-empty and positive".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for spec in specs {
        spec.validate()?;
        if !seen.insert(spec.lang_id.clone()) {
            return Err(Error::Config(format!("duplicate language {}", spec.lang_id)));
        }
    }

    let mut metrics = Vec::new();
    let mut models: Vec<ToyAcousticModel> = Vec::new();
    for (lang_no, spec) in specs.iter().enumerate() {
        let dir = lang_dir(root, &spec.lang_id);
        let train = generate_split(spec, 0..train_utts, frame_range, &dir)?;
        let eval = generate_split(
            spec,
            train_utts..train_utts + eval_utts,
            frame_range,
            &dir,
        )?;
        write_jsonl(dir.join(Split::Train.manifest_name()), &train.records)?;
        write_jsonl(dir.join(Split::Eval.manifest_name()), &eval.records)?;
        write_jsonl(dir.join(Split::Train.labels_name()), &train.labels)?;
        write_jsonl(dir.join(Split::Eval.labels_name()), &eval.labels)?;
        crate::manifest::save_inventory(inventory_path(root, &spec.lang_id), &spec.inventory()?)?;

        let data: Vec<(FeatureSequence, Vec<usize>)> = train
            .records
            .iter()
            .zip(&train.labels)
            .map(|(rec, lab)| Ok((load_features(dir.join(&rec.feature_file))?, lab.labels.clone())))
            .collect::<Result<_>>()?;
        // Each language trains from its own random stream.
        let opts = ToyAmOptions {
            seed: am_opts.seed.wrapping_add(1000 * (lang_no as u64 + 1)),
            ..am_opts.clone()
        };
        let outcome = train_toy_am(&spec.lang_id, &data, spec.tokens.len(), &opts)?;
        write_json(toy_am_path(root, &spec.lang_id), &outcome.model)?;
        metrics.push(ToyAmMetric {
            lang: spec.lang_id.clone(),
            holdout_accuracy: outcome.holdout_accuracy,
            holdout_utts: outcome.holdout_utts,
        });
        models.push(outcome.model);
    }
    write_json(root.join("models").join("toy_am_metrics.json"), &metrics)?;

    // Posteriors: every model hears every language's audio.
    for split in [Split::Train, Split::Eval] {
        for spec in specs {
            let loaded = load_manifest(manifest_path(root, &spec.lang_id, split))?;
            let jobs_items: Vec<CorpusRecord> = loaded.manifest.records().to_vec();
            let results = par_map_ordered(jobs_items, jobs, |rec| -> Result<()> {
                let features = load_features(loaded.resolve(&rec))?;
                for model in &models {
                    let probs = model.posteriors(&features)?;
                    save_posteriors(
                        posterior_path(root, split, &spec.lang_id, &model.lang_id, &rec.utt_id),
                        &probs,
                    )?;
                }
                Ok(())
            });
            for r in results {
                r?;
            }
        }
    }

    Ok(SynthOutcome {
        languages: specs.iter().map(|s| s.lang_id.clone()).collect(),
        train_utts,
        eval_utts,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order_for_any_job_count() {
        let items: Vec<usize> = (0..23).collect();
        let expect: Vec<usize> = items.iter().map(|v| v * 7).collect();
        for jobs in [1, 2, 3, 8, 64] {
            let got = par_map_ordered(items.clone(), jobs, |v| v * 7);
            assert_eq!(got, expect, "jobs = {jobs}");
        }
    }

    #[test]
    fn relative_paths_round_trip() {
        let base = Path::new("/data/corpus/plans");
        let target = Path::new("/data/corpus/alfa/features/u1.xlft");
        let rel = relative_from(base, target);
        assert_eq!(rel, Path::new("../alfa/features/u1.xlft"));
        assert_eq!(absolutize(&base.join(&rel)), absolutize(target));

        assert_eq!(
            relative_from(Path::new("/a/b"), Path::new("/a/b/c")),
            Path::new("c")
        );
        assert_eq!(relative_from(Path::new("/a/b"), Path::new("/a/b")), Path::new("."));
        assert_eq!(
            relative_from(Path::new("/a/b/c"), Path::new("/x")),
            Path::new("../../../x")
        );
    }

    #[test]
    fn absolutize_squashes_dots() {
        assert_eq!(
            absolutize(Path::new("/a/b/../c/./d")),
            PathBuf::from("/a/c/d")
        );
    }
}
