//! JSON-lines corpus metadata: manifests, inventories, frame labels,
//! training history, evaluation reports and augmentation plans.
//!
//! Every `.jsonl` file holds one JSON object per line. Inventories are a
//! single line; manifests, label files, history and reports are one record
//! per line. Unknown fields are ignored on read, which lets an augmentation
//! plan double as a plain manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use xlmap_core::corpus::{CorpusManifest, CorpusRecord, LangId, TokenInventory};
use xlmap_core::decode::AugmentationMode;
use xlmap_core::evaluation::{AccuracyReport, CerReport};
use xlmap_core::training::{Optimizer, TrainConfig, Weighting};

use crate::error::{Error, Result};

/// Reads one deserialisable record per non-empty line.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: path.to_path_buf(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?);
    }
    Ok(out)
}

/// Writes one record per line, creating parent directories.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads one JSON document.
pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: path.to_path_buf(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes one pretty-printed JSON document, creating parent directories.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A manifest plus the directory its `feature_file` paths are relative to.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: CorpusManifest,
    pub base_dir: PathBuf,
}

impl LoadedManifest {
    /// Absolute (or cwd-relative) path of a record's feature file.
    pub fn resolve(&self, record: &CorpusRecord) -> PathBuf {
        self.base_dir.join(&record.feature_file)
    }
}

/// Loads a manifest; feature paths resolve against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<LoadedManifest> {
    let path = path.as_ref();
    let records: Vec<CorpusRecord> = read_jsonl(path)?;
    let manifest = CorpusManifest::new(records)?;
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok(LoadedManifest { manifest, base_dir })
}

pub fn save_manifest(path: impl AsRef<Path>, records: &[CorpusRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// Loads a token inventory; the file must hold exactly one record.
pub fn load_inventory(path: impl AsRef<Path>) -> Result<TokenInventory> {
    let path = path.as_ref();
    let mut records: Vec<TokenInventory> = read_jsonl(path)?;
    match records.len() {
        1 => Ok(records.pop().expect("length checked")),
        n => Err(Error::malformed(
            path,
            format!("expected exactly one inventory record, found {n}"),
        )),
    }
}

pub fn save_inventory(path: impl AsRef<Path>, inventory: &TokenInventory) -> Result<()> {
    write_jsonl(path, std::slice::from_ref(inventory))
}

/// Per-frame reference labels of one utterance, indices into the language's
/// inventory. `phones` is an optional readable rendering of the same frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabelRecord {
    pub utt_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phones: Option<Vec<String>>,
    pub labels: Vec<usize>,
}

/// Frame labels inside an augmentation plan, where a bare utterance id would
/// collide across languages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanLabelRecord {
    pub utt_id: String,
    pub lang_id: LangId,
    pub labels: Vec<usize>,
}

/// One ciphered utterance as written by the cipher pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CipheredRecord {
    pub utt_id: String,
    pub source_lang: LangId,
    pub target_lang: LangId,
    /// Source feature file, relative to the corpus root.
    pub feature_file: String,
    pub duration_frames: usize,
    /// Decoded text in the target token space; may be empty.
    pub text: String,
    pub empty: bool,
    /// Per-frame argmax indices into the target inventory.
    pub frame_labels: Vec<usize>,
}

/// Sidecar metadata of an augmentation plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMeta {
    pub target_lang: LangId,
    pub mode: AugmentationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closest_lang: Option<LangId>,
}

/// Renders accuracy reports as an aligned text table, percentages with two
/// decimals.
pub fn accuracy_table(reports: &[AccuracyReport]) -> String {
    let mut ns: Vec<usize> = reports
        .iter()
        .flat_map(|r| r.per_n.keys().copied())
        .collect();
    ns.sort_unstable();
    ns.dedup();
    let mut out = String::from("source -> target  frames");
    for n in &ns {
        out.push_str(&format!("  top-{n} %"));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{:<16}  {:>6}",
            format!("{} -> {}", r.source_lang, r.target_lang),
            r.total_frames
        ));
        for n in &ns {
            match r.per_n.get(n) {
                Some(acc) => out.push_str(&format!("  {:>7.2}", acc * 100.0)),
                None => out.push_str("        -"),
            }
        }
        out.push('\n');
    }
    out
}

/// Renders CER reports as an aligned text table, percentages with two
/// decimals.
pub fn cer_table(reports: &[CerReport]) -> String {
    let mut out = String::from("lang  utterances  ref_chars  edits    CER %\n");
    for r in reports {
        out.push_str(&format!(
            "{:<4}  {:>10}  {:>9}  {:>5}  {:>7.2}\n",
            r.lang, r.utterances, r.ref_chars, r.edits, r.percent()
        ));
    }
    out
}

/// Optional overrides for [`TrainConfig`], read from a TOML file. Every field
/// is optional; present fields replace the corresponding flag or default.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    /// `"sgd"` or `"adam"`.
    pub optimizer: Option<String>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_epsilon: Option<f64>,
    /// `"mean"` or `"rank_sum"`.
    pub weighting: Option<String>,
    pub clip_norm: Option<f64>,
    pub seed: Option<u64>,
    pub dev_fraction: Option<f64>,
}

pub fn load_train_overrides(path: impl AsRef<Path>) -> Result<TrainOverrides> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: path.to_path_buf(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    toml::from_str(&text).map_err(|e| Error::Toml {
        path: path.to_path_buf(),
        source: e,
    })
}

impl TrainOverrides {
    /// Applies the overrides on top of `config`.
    pub fn apply(&self, config: &mut TrainConfig) -> Result<()> {
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            config.learning_rate = v;
        }
        if let Some(name) = &self.optimizer {
            config.optimizer = match name.as_str() {
                "sgd" => Optimizer::Sgd,
                "adam" => Optimizer::adam_default(),
                other => {
                    return Err(Error::Config(format!(
                        "unknown optimizer {other:?}, expected \"sgd\" or \"adam\""
                    )))
                }
            };
        }
        if self.adam_beta1.is_some() || self.adam_beta2.is_some() || self.adam_epsilon.is_some() {
            let (mut beta1, mut beta2, mut epsilon) = match config.optimizer {
                Optimizer::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } => (beta1, beta2, epsilon),
                Optimizer::Sgd => {
                    return Err(Error::Config(
                        "adam_* settings require the adam optimizer".into(),
                    ))
                }
            };
            if let Some(v) = self.adam_beta1 {
                beta1 = v;
            }
            if let Some(v) = self.adam_beta2 {
                beta2 = v;
            }
            if let Some(v) = self.adam_epsilon {
                epsilon = v;
            }
            config.optimizer = Optimizer::Adam {
                beta1,
                beta2,
                epsilon,
            };
        }
        if let Some(name) = &self.weighting {
            config.weighting = match name.as_str() {
                "mean" => Weighting::Mean,
                "rank_sum" => Weighting::RankSum,
                other => {
                    return Err(Error::Config(format!(
                        "unknown weighting {other:?}, expected \"mean\" or \"rank_sum\""
                    )))
                }
            };
        }
        if let Some(v) = self.clip_norm {
            config.clip_norm = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.dev_fraction {
            config.dev_fraction = v;
        }
        Ok(())
    }
}
