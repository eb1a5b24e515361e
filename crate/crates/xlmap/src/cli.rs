//! Command line interface.
//!
//! Subcommands cover the full experiment loop: `synth` builds the demo
//! corpus, `train-map` fits a mapping model, `eval-map` scores it, `decode`
//! and `cipher` turn posteriors into text, `augment` assembles a retraining
//! plan, and `cer` scores transcripts. Every command is deterministic given
//! `--seed`; `--jobs` only spreads independent per-utterance work across
//! threads and never changes any output byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;

use xlmap_core::corpus::{LangId, SourceDims};
use xlmap_core::decode::{greedy_decode, AugmentationMode, DecodeResult};
use xlmap_core::evaluation::{cer, AccuracyReport};
use xlmap_core::mesd::MesdModel;
use xlmap_core::training::{train, TrainConfig};

use crate::checkpoint::{load_checkpoint, load_checkpoint_checked, save_checkpoint};
use crate::error::{Error, Result};
use crate::manifest::{
    accuracy_table, cer_table, load_inventory, load_train_overrides, read_jsonl, write_json,
    write_jsonl, CipheredRecord, TrainOverrides,
};
use crate::pipeline::{
    assemble_plan, cipher_split, eval_mapping, identity_eval, inventory_path, load_paired_corpus,
    synthesize_corpus, Split,
};
use crate::synth::{demo_specs, ToyAmOptions};
use crate::xlpo::load_posteriors;

#[derive(Debug, Parser)]
#[command(
    name = "xlmap",
    version,
    about = "Cross-lingual phone posterior mapping toolkit"
)]
pub struct Cli {
    /// Seed behind every random choice an invocation makes.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,

    /// Threads for independent per-utterance work; outputs do not depend on
    /// this.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    /// Keep ciphered data from every source.
    #[value(name = "augAll")]
    AugAll,
    /// Keep only the closest source by top-1 accuracy.
    #[value(name = "augTwo")]
    AugTwo,
}

impl From<ModeArg> for AugmentationMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::AugAll => AugmentationMode::AugAll,
            ModeArg::AugTwo => AugmentationMode::AugTwo,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the built-in three-language demo corpus with toy acoustic
    /// models and all cross-language posteriors.
    Synth {
        /// Corpus root to create.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        train_utts: usize,
        #[arg(long, default_value_t = 40)]
        eval_utts: usize,
        /// Utterance length is drawn uniformly from [min_frames, max_frames).
        #[arg(long, default_value_t = 20)]
        min_frames: usize,
        #[arg(long, default_value_t = 40)]
        max_frames: usize,
        #[arg(long, default_value_t = 16)]
        am_hidden: usize,
        #[arg(long, default_value_t = 30)]
        am_epochs: usize,
        #[arg(long, default_value_t = 0.3)]
        am_learning_rate: f64,
    },

    /// Train a mapping model on the target language's audio as heard by the
    /// source recognisers.
    TrainMap {
        /// Corpus root, as produced by `synth`.
        #[arg(long)]
        root: PathBuf,
        /// Target language whose posteriors the model learns to produce.
        #[arg(long)]
        target: String,
        /// Source languages, comma separated; one encoder each.
        #[arg(long, value_delimiter = ',', num_args(1..))]
        sources: Vec<String>,
        /// Encoder and decoder hidden width. Ignored when resuming.
        #[arg(long, default_value_t = 16)]
        hidden: usize,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// History file; defaults to the checkpoint path with a
        /// `history.jsonl` extension.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Resume from an existing checkpoint instead of a fresh
        /// initialisation.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        /// TOML file of training settings; values there override the flags
        /// below.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// "sgd" or "adam".
        #[arg(long)]
        optimizer: Option<String>,
        /// "mean" or "rank_sum".
        #[arg(long)]
        weighting: Option<String>,
        #[arg(long)]
        clip_norm: Option<f64>,
        #[arg(long)]
        dev_fraction: Option<f64>,
    },

    /// Score a mapping model's top-n accuracy per source language.
    EvalMap {
        #[arg(long)]
        root: PathBuf,
        /// Checkpoint to evaluate. Not used with --identity.
        #[arg(long, conflicts_with = "identity")]
        checkpoint: Option<PathBuf>,
        /// Score the identity mapping of the target language's own
        /// posteriors instead; every accuracy must be exactly 1.
        #[arg(long, requires = "target")]
        identity: bool,
        /// Target language; only needed with --identity.
        #[arg(long)]
        target: Option<String>,
        #[arg(long, value_enum, default_value_t = Split::Eval)]
        split: Split,
        /// Accuracy ranks to report, comma separated.
        #[arg(long, value_delimiter = ',', num_args(1..), default_values_t = [1usize, 2, 5, 10])]
        ns: Vec<usize>,
        /// Optional report file (one JSON report per source per line).
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Greedy-decode posterior files into text.
    Decode {
        /// One `.xlpo` file, or a directory decoded in name order.
        #[arg(long)]
        posteriors: PathBuf,
        /// Token inventory matching the posterior dimension.
        #[arg(long)]
        inventory: PathBuf,
        /// Write decode records here instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Map a source language's own posteriors into the target space and
    /// decode them: foreign audio rendered as target text.
    Cipher {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source language to cipher.
        #[arg(long)]
        source: String,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
        /// Ciphered records file to write.
        #[arg(long)]
        out: PathBuf,
    },

    /// Bundle target originals with ciphered data into a retraining plan.
    Augment {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        target: String,
        /// Ciphered record files from `cipher`, one or more.
        #[arg(long, num_args(1..), required = true)]
        ciphered: Vec<PathBuf>,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Accuracy reports from `eval-map`; required for augTwo.
        #[arg(long)]
        reports: Option<PathBuf>,
        /// Directory receiving plan.jsonl, plan_meta.json and
        /// plan_labels.jsonl.
        #[arg(long)]
        out: PathBuf,
    },

    /// Character error rate of hypothesis transcripts against references.
    Cer {
        /// References: plain text (one utterance per line) or `.jsonl` with
        /// utt_id and text/transcript fields.
        #[arg(long)]
        refs: PathBuf,
        /// Hypotheses in the same format as the references.
        #[arg(long)]
        hyps: PathBuf,
        /// Language tag for the report.
        #[arg(long, default_value = "und")]
        lang: String,
        /// Replace this marker with a space on both sides before scoring.
        #[arg(long)]
        space_marker: Option<char>,
        /// Optional JSON report file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            train_utts,
            eval_utts,
            min_frames,
            max_frames,
            am_hidden,
            am_epochs,
            am_learning_rate,
        } => {
            if min_frames >= max_frames {
                return Err(Error::Config(
                    "min_frames must be smaller than max_frames".into(),
                ));
            }
            let specs = demo_specs(cli.seed);
            let opts = ToyAmOptions {
                hidden_dim: am_hidden,
                epochs: am_epochs,
                learning_rate: am_learning_rate,
                holdout_fraction: 0.1,
                seed: cli.seed,
            };
            let outcome = synthesize_corpus(
                &out,
                &specs,
                train_utts,
                eval_utts,
                &(min_frames..max_frames),
                &opts,
                cli.jobs,
            )?;
            println!(
                "synthesized {} languages x ({} train + {} eval) utterances under {}",
                outcome.languages.len(),
                outcome.train_utts,
                outcome.eval_utts,
                out.display()
            );
            for m in &outcome.metrics {
                println!(
                    "  {}: frame accuracy {:.2}% on {} holdout utterances",
                    m.lang,
                    100.0 * m.holdout_accuracy,
                    m.holdout_utts
                );
            }
            Ok(())
        }

        Command::TrainMap {
            root,
            target,
            sources,
            hidden,
            out,
            history,
            init_checkpoint,
            config,
            epochs,
            batch_size,
            learning_rate,
            optimizer,
            weighting,
            clip_norm,
            dev_fraction,
        } => {
            let target = LangId::new(target);
            let sources = parse_langs(&sources)?;
            let inventory = load_inventory(inventory_path(&root, &target))?;

            let mut train_config = TrainConfig {
                seed: cli.seed,
                ..TrainConfig::default()
            };
            let flag_overrides = TrainOverrides {
                epochs,
                batch_size,
                learning_rate,
                optimizer,
                weighting,
                clip_norm,
                dev_fraction,
                ..TrainOverrides::default()
            };
            flag_overrides.apply(&mut train_config)?;
            if let Some(path) = &config {
                load_train_overrides(path)?.apply(&mut train_config)?;
            }

            let corpus = load_paired_corpus(&root, &target, &sources, Split::Train)?;
            let model = match &init_checkpoint {
                Some(path) => {
                    let model = load_checkpoint_checked(path, &inventory)?;
                    let have: BTreeSet<&LangId> = model.encoder_langs().collect();
                    let want: BTreeSet<&LangId> = sources.iter().collect();
                    if have != want {
                        return Err(Error::Config(format!(
                            "checkpoint encoders ({}) do not match --sources ({})",
                            join_langs(have),
                            join_langs(want)
                        )));
                    }
                    model
                }
                None => {
                    let dims: SourceDims = sources
                        .iter()
                        .map(|lang| (lang.clone(), corpus[0].sources[lang].num_classes()))
                        .collect();
                    MesdModel::init(&inventory, &dims, hidden, train_config.seed)?
                }
            };
            println!(
                "training {} -> {} mapping: {} parameters, {} utterances, {} epochs",
                sources
                    .iter()
                    .map(LangId::to_string)
                    .collect::<Vec<_>>()
                    .join("+"),
                target,
                model.count_params(),
                corpus.len(),
                train_config.epochs
            );

            let outcome = train(model, &corpus, &train_config)?;
            save_checkpoint(&out, &outcome.model)?;
            let history_path =
                history.unwrap_or_else(|| out.with_extension("history.jsonl"));
            write_jsonl(&history_path, &outcome.history)?;

            let first = outcome.history.first().expect("history is never empty");
            let best = outcome
                .history
                .iter()
                .map(|r| r.dev_loss)
                .fold(f64::INFINITY, f64::min);
            println!(
                "dev loss {:.6} -> {:.6} over {} epochs; checkpoint {}, history {}",
                first.dev_loss,
                best,
                outcome.history.len() - 1,
                out.display(),
                history_path.display()
            );
            Ok(())
        }

        Command::EvalMap {
            root,
            checkpoint,
            identity,
            target,
            split,
            ns,
            out,
        } => {
            let reports = if identity {
                let target =
                    LangId::new(target.expect("clap enforces --target with --identity"));
                vec![identity_eval(&root, &target, split, &ns)?]
            } else {
                let path = checkpoint.ok_or_else(|| {
                    Error::Config("either --checkpoint or --identity is required".into())
                })?;
                let model = load_checkpoint(&path)?;
                eval_mapping(&root, &model, split, &ns)?
            };
            print!("{}", accuracy_table(&reports));
            if let Some(path) = out {
                write_jsonl(&path, &reports)?;
            }
            Ok(())
        }

        Command::Decode {
            posteriors,
            inventory,
            out,
        } => {
            let inventory = load_inventory(&inventory)?;
            if posteriors.is_dir() {
                let mut files: Vec<PathBuf> = fs::read_dir(&posteriors)
                    .map_err(|e| Error::io(&posteriors, e))?
                    .filter_map(|entry| entry.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|ext| ext == "xlpo"))
                    .collect();
                files.sort();
                if files.is_empty() {
                    return Err(Error::Config(format!(
                        "no .xlpo files under {}",
                        posteriors.display()
                    )));
                }
                let mut results: Vec<DecodeResult> = Vec::with_capacity(files.len());
                for file in &files {
                    let seq = load_posteriors(file)?;
                    results.push(greedy_decode(&seq, &inventory)?);
                }
                match out {
                    Some(path) => write_jsonl(&path, &results)?,
                    None => {
                        for r in &results {
                            println!("{}\t{}", r.utt_id, r.text);
                        }
                    }
                }
            } else {
                let seq = load_posteriors(&posteriors)?;
                let result = greedy_decode(&seq, &inventory)?;
                match out {
                    Some(path) => write_jsonl(&path, std::slice::from_ref(&result))?,
                    None => println!("{}", result.text),
                }
            }
            Ok(())
        }

        Command::Cipher {
            root,
            checkpoint,
            source,
            split,
            out,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let inventory = load_inventory(inventory_path(&root, model.target_lang()))?;
            let source = LangId::new(source);
            let records = cipher_split(&root, &model, &source, &inventory, split)?;
            let empties = records.iter().filter(|r| r.empty).count();
            write_jsonl(&out, &records)?;
            println!(
                "ciphered {} {} utterances into {} ({} empty) -> {}",
                records.len(),
                source,
                model.target_lang(),
                empties,
                out.display()
            );
            Ok(())
        }

        Command::Augment {
            root,
            target,
            ciphered,
            mode,
            reports,
            out,
        } => {
            let target = LangId::new(target);
            let mut grouped: BTreeMap<LangId, Vec<CipheredRecord>> = BTreeMap::new();
            for file in &ciphered {
                for rec in read_jsonl::<CipheredRecord>(file)? {
                    if rec.target_lang != target {
                        return Err(Error::Config(format!(
                            "{} targets {}, not {}",
                            file.display(),
                            rec.target_lang,
                            target
                        )));
                    }
                    grouped.entry(rec.source_lang.clone()).or_default().push(rec);
                }
            }
            let reports: Vec<AccuracyReport> = match &reports {
                Some(path) => read_jsonl(path)?,
                None => Vec::new(),
            };
            let outcome = assemble_plan(&root, &target, &grouped, mode.into(), &reports, &out)?;
            let ciphered_count = outcome.plan.records.iter().filter(|r| r.ciphered).count();
            let empties = outcome.plan.records.iter().filter(|r| r.empty).count();
            println!(
                "plan for {}: {} originals + {} ciphered ({} flagged empty){} -> {}",
                outcome.plan.target_lang,
                outcome.plan.records.len() - ciphered_count,
                ciphered_count,
                empties,
                match &outcome.plan.closest_lang {
                    Some(lang) => format!(", closest source {lang}"),
                    None => String::new(),
                },
                outcome.plan_file.display()
            );
            Ok(())
        }

        Command::Cer {
            refs,
            hyps,
            lang,
            space_marker,
            out,
        } => {
            let (ref_texts, hyp_texts) = pair_texts(&refs, &hyps)?;
            let normalize = |texts: Vec<String>| -> Vec<String> {
                match space_marker {
                    Some(marker) => texts
                        .into_iter()
                        .map(|t| t.replace(marker, " "))
                        .collect(),
                    None => texts,
                }
            };
            let report = cer(
                &LangId::new(lang),
                &normalize(ref_texts),
                &normalize(hyp_texts),
            )?;
            print!("{}", cer_table(std::slice::from_ref(&report)));
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            Ok(())
        }
    }
}

fn parse_langs(tags: &[String]) -> Result<Vec<LangId>> {
    if tags.is_empty() {
        return Err(Error::Config("at least one source language is required".into()));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(tags.len());
    for tag in tags {
        let lang = LangId::new(tag.clone());
        if !seen.insert(lang.clone()) {
            return Err(Error::Config(format!("duplicate source language {lang}")));
        }
        out.push(lang);
    }
    Ok(out)
}

fn join_langs(langs: BTreeSet<&LangId>) -> String {
    langs
        .iter()
        .map(|l| l.as_str())
        .collect::<Vec<_>>()
        .join(",")
}

/// One line of a keyed transcript file.
#[derive(Deserialize)]
struct TextLine {
    utt_id: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    transcript: Option<String>,
}

enum Texts {
    Keyed(Vec<(String, String)>),
    Plain(Vec<String>),
}

fn load_texts(path: &Path) -> Result<Texts> {
    if path.extension().is_some_and(|ext| ext == "jsonl") {
        let lines: Vec<TextLine> = read_jsonl(path)?;
        let mut out = Vec::with_capacity(lines.len());
        for line in lines {
            let text = line.text.or(line.transcript).ok_or_else(|| {
                Error::malformed(path, format!("utterance {:?} has no text or transcript", line.utt_id))
            })?;
            out.push((line.utt_id, text));
        }
        Ok(Texts::Keyed(out))
    } else {
        let content = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile {
                    path: path.to_path_buf(),
                }
            } else {
                Error::io(path, e)
            }
        })?;
        Ok(Texts::Plain(content.lines().map(str::to_string).collect()))
    }
}

/// Pairs references with hypotheses: keyed files join on utterance id in
/// reference order, plain files pair line by line.
fn pair_texts(refs: &Path, hyps: &Path) -> Result<(Vec<String>, Vec<String>)> {
    match (load_texts(refs)?, load_texts(hyps)?) {
        (Texts::Keyed(r), Texts::Keyed(h)) => {
            let by_id: BTreeMap<String, String> = h.into_iter().collect();
            let mut ref_texts = Vec::with_capacity(r.len());
            let mut hyp_texts = Vec::with_capacity(r.len());
            for (utt_id, text) in r {
                let hyp = by_id.get(&utt_id).ok_or_else(|| {
                    Error::malformed(hyps, format!("no hypothesis for utterance {utt_id:?}"))
                })?;
                ref_texts.push(text);
                hyp_texts.push(hyp.clone());
            }
            Ok((ref_texts, hyp_texts))
        }
        (Texts::Plain(r), Texts::Plain(h)) => Ok((r, h)),
        _ => Err(Error::Config(
            "references and hypotheses must both be .jsonl or both be plain text".into(),
        )),
    }
}
