//! Synthetic multilingual corpus generator and toy frame-level acoustic
//! models.
//!
//! Each language draws utterances from a latent phone Markov chain and emits
//! Gaussian feature vectors around per-phone means. Two of the built-in demo
//! languages (`alfa` and `brav`) share their emission means and differ only
//! in how phones spell into tokens, making them acoustically related; the
//! third (`xray`) uses independent random means and is unrelated. That
//! contrast is what mapping experiments need: a source whose posteriors carry
//! the target's phonetics and one whose posteriors do not.
//!
//! The toy acoustic model is a single-hidden-layer tanh network trained with
//! per-utterance SGD on frame cross-entropy. It stands in for a real
//! multilingual frontend: good enough to give sharp posteriors on its own
//! language, cheap enough to retrain inside a test.
//!
//! Everything is deterministic. Each utterance derives its random stream from
//! the language seed and the utterance index alone, so corpora are
//! reproducible no matter how generation is chunked or parallelised.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use xlmap_core::corpus::{CorpusRecord, LangId, PosteriorSequence, TokenInventory};
use xlmap_core::decode::collapse_indices;
use xlmap_core::numerics::{argmax, softmax, Matrix};

use crate::error::{Error, Result};
use crate::manifest::FrameLabelRecord;
use crate::xlpo::FeatureSequence;

/// Generative description of one synthetic language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLanguageSpec {
    pub lang_id: LangId,
    pub tokens: Vec<String>,
    pub blank_index: usize,
    pub space_marker: char,
    /// Latent phone names, for readable frame labels.
    pub phone_names: Vec<String>,
    /// Token index emitted by each phone; never the blank.
    pub phone_to_token: Vec<usize>,
    /// Per-phone feature-space means, `phones x feature_dim`.
    pub emission_means: Vec<Vec<f64>>,
    pub emission_stddev: f64,
    /// Per-frame probability of staying in the current phone.
    pub self_loop: f64,
    pub seed: u64,
}

impl SynthLanguageSpec {
    pub fn validate(&self) -> Result<()> {
        let phones = self.phone_names.len();
        if phones == 0 {
            return Err(Error::Config("language needs at least one phone".into()));
        }
        if self.phone_to_token.len() != phones || self.emission_means.len() != phones {
            return Err(Error::Config(
                "phone_names, phone_to_token and emission_means must have equal length".into(),
            ));
        }
        for &tok in &self.phone_to_token {
            if tok >= self.tokens.len() {
                return Err(Error::Config(format!(
                    "phone maps to token {tok}, but only {} tokens exist",
                    self.tokens.len()
                )));
            }
            if tok == self.blank_index {
                return Err(Error::Config("no phone may map to the blank token".into()));
            }
        }
        let dim = self.feature_dim();
        if dim == 0 || self.emission_means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config(
                "emission means must be non-empty and equally sized".into(),
            ));
        }
        if !self.emission_stddev.is_finite() || self.emission_stddev <= 0.0 {
            return Err(Error::Config("emission_stddev must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.self_loop) {
            return Err(Error::Config("self_loop must lie in [0, 1)".into()));
        }
        // Token list constraints are the inventory's own rules.
        self.inventory()?;
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.emission_means.first().map_or(0, Vec::len)
    }

    pub fn num_phones(&self) -> usize {
        self.phone_names.len()
    }

    pub fn inventory(&self) -> Result<TokenInventory> {
        TokenInventory::new(
            self.lang_id.clone(),
            self.tokens.clone(),
            self.blank_index,
            Some(self.space_marker),
        )
        .map_err(Error::from)
    }
}

const DEMO_FEATURE_DIM: usize = 8;
const DEMO_PHONES: usize = 10;
const DEMO_STDDEV: f64 = 0.5;
const DEMO_SELF_LOOP: f64 = 0.6;

/// Means shared by the two related demo languages: axis-aligned peaks, with
/// the two extra phones on negated axes so ten phones fit in eight
/// dimensions.
fn demo_shared_means() -> Vec<Vec<f64>> {
    let mut means = Vec::with_capacity(DEMO_PHONES);
    for p in 0..DEMO_PHONES {
        let mut m = vec![0.0; DEMO_FEATURE_DIM];
        if p < DEMO_FEATURE_DIM {
            m[p] = 3.0;
        } else {
            m[p - DEMO_FEATURE_DIM] = -3.0;
        }
        means.push(m);
    }
    means
}

fn names(prefix: &str, items: &[&str]) -> Vec<String> {
    let mut out = Vec::with_capacity(items.len() + 2);
    out.push(prefix.to_string());
    out.extend(items.iter().map(|s| s.to_string()));
    out.push("_".to_string());
    out
}

/// The built-in three-language demo set: `alfa` and `brav` are acoustically
/// identical twins with different spellings, `xray` is unrelated.
pub fn demo_specs(seed: u64) -> Vec<SynthLanguageSpec> {
    let phone_names: Vec<String> = (0..DEMO_PHONES).map(|p| format!("p{p}")).collect();
    let shared = demo_shared_means();

    // Phones spell ascending for alfa, descending for brav; both skip the
    // blank at index 0.
    let alfa_p2t: Vec<usize> = (0..DEMO_PHONES).map(|p| p + 1).collect();
    let brav_p2t: Vec<usize> = (0..DEMO_PHONES).map(|p| DEMO_PHONES - p).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7872_6179); // distinct stream for xray means
    let xray_means: Vec<Vec<f64>> = (0..DEMO_PHONES)
        .map(|_| {
            (0..DEMO_FEATURE_DIM)
                .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    vec![
        SynthLanguageSpec {
            lang_id: LangId::from("alfa"),
            tokens: names("<blk>", &["a", "b", "c", "d", "e", "f", "g", "h", "i"]),
            blank_index: 0,
            space_marker: '_',
            phone_names: phone_names.clone(),
            phone_to_token: alfa_p2t,
            emission_means: shared.clone(),
            emission_stddev: DEMO_STDDEV,
            self_loop: DEMO_SELF_LOOP,
            seed: seed.wrapping_add(1),
        },
        SynthLanguageSpec {
            lang_id: LangId::from("brav"),
            tokens: names("<blk>", &["k", "l", "m", "n", "o", "p", "q", "r", "s"]),
            blank_index: 0,
            space_marker: '_',
            phone_names: phone_names.clone(),
            phone_to_token: brav_p2t,
            emission_means: shared,
            emission_stddev: DEMO_STDDEV,
            self_loop: DEMO_SELF_LOOP,
            seed: seed.wrapping_add(2),
        },
        SynthLanguageSpec {
            lang_id: LangId::from("xray"),
            tokens: names("<blk>", &["t", "u", "v", "w", "x", "y", "z", "0", "1"]),
            blank_index: 0,
            space_marker: '_',
            phone_names,
            phone_to_token: (0..DEMO_PHONES).map(|p| p + 1).collect(),
            emission_means: xray_means,
            emission_stddev: DEMO_STDDEV,
            self_loop: DEMO_SELF_LOOP,
            seed: seed.wrapping_add(3),
        },
    ]
}

/// One generated utterance before anything is written to disk.
pub struct SynthUtterance {
    pub utt_id: String,
    pub features: FeatureSequence,
    pub phones: Vec<usize>,
    /// Per-frame token labels, `phone_to_token` applied to `phones`.
    pub labels: Vec<usize>,
    pub transcript: String,
}

/// Generates utterance `index` of a language. Deterministic in
/// `(spec.seed, index)` only, so any subset of a corpus can be regenerated
/// independently.
pub fn generate_utterance(
    spec: &SynthLanguageSpec,
    index: usize,
    frame_range: &Range<usize>,
) -> Result<SynthUtterance> {
    let inventory = spec.inventory()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);

    let frames = if frame_range.len() <= 1 {
        frame_range.start
    } else {
        rng.random_range(frame_range.clone())
    };
    let phones = spec.num_phones();
    let dim = spec.feature_dim();

    let mut phone_seq = Vec::with_capacity(frames);
    let mut features = Matrix::zeros(frames, dim);
    let mut current = rng.random_range(0..phones);
    for t in 0..frames {
        if t > 0 && rng.random::<f64>() >= spec.self_loop {
            // Jump to a different phone, uniform over the rest.
            let step = rng.random_range(1..phones);
            current = (current + step) % phones;
        }
        phone_seq.push(current);
        let mean = &spec.emission_means[current];
        for (f, m) in features.row_mut(t).iter_mut().zip(mean) {
            *f = m + spec.emission_stddev * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let labels: Vec<usize> = phone_seq.iter().map(|&p| spec.phone_to_token[p]).collect();
    let transcript = inventory.detokenize(&collapse_indices(&labels, spec.blank_index))?;
    Ok(SynthUtterance {
        utt_id: format!("u{index:05}"),
        features: FeatureSequence {
            lang_id: spec.lang_id.clone(),
            utt_id: format!("u{index:05}"),
            frames: features,
        },
        phones: phone_seq,
        labels,
        transcript,
    })
}

/// One split of one language, ready to be written out.
pub struct GeneratedSplit {
    pub records: Vec<CorpusRecord>,
    pub labels: Vec<FrameLabelRecord>,
}

/// Generates utterances `utt_range` of a language and writes their feature
/// files under `lang_dir/features/`. Manifest paths come back relative to
/// `lang_dir`.
pub fn generate_split(
    spec: &SynthLanguageSpec,
    utt_range: Range<usize>,
    frame_range: &Range<usize>,
    lang_dir: &Path,
) -> Result<GeneratedSplit> {
    spec.validate()?;
    let mut records = Vec::with_capacity(utt_range.len());
    let mut labels = Vec::with_capacity(utt_range.len());
    for index in utt_range {
        let utt = generate_utterance(spec, index, frame_range)?;
        let rel = format!("features/{}.xlft", utt.utt_id);
        crate::xlpo::save_features(lang_dir.join(&rel), &utt.features)?;
        records.push(CorpusRecord {
            utt_id: utt.utt_id.clone(),
            lang_id: spec.lang_id.clone(),
            feature_file: rel,
            transcript: utt.transcript,
            duration_frames: utt.features.num_frames(),
        });
        labels.push(FrameLabelRecord {
            utt_id: utt.utt_id,
            phones: Some(
                utt.phones
                    .iter()
                    .map(|&p| spec.phone_names[p].clone())
                    .collect(),
            ),
            labels: utt.labels,
        });
    }
    Ok(GeneratedSplit { records, labels })
}

/// A one-hidden-layer tanh network over single frames, softmax output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyAcousticModel {
    pub lang_id: LangId,
    /// `hidden x feature_dim`.
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `classes x hidden`.
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl ToyAcousticModel {
    pub fn feature_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.rows()
    }

    fn init(
        lang_id: LangId,
        feature_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut w1 = Matrix::zeros(hidden_dim, feature_dim);
        let mut w2 = Matrix::zeros(num_classes, hidden_dim);
        let bound1 = 1.0 / (feature_dim as f64).sqrt();
        for v in w1.data_mut() {
            *v = rng.random_range(-bound1..=bound1);
        }
        let bound2 = 1.0 / (hidden_dim as f64).sqrt();
        for v in w2.data_mut() {
            *v = rng.random_range(-bound2..=bound2);
        }
        ToyAcousticModel {
            lang_id,
            w1,
            b1: vec![0.0; hidden_dim],
            w2,
            b2: vec![0.0; num_classes],
        }
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.b1.clone();
        self.w1.mul_vec_add(x, &mut h);
        for v in &mut h {
            *v = v.tanh();
        }
        h
    }

    fn class_probs(&self, h: &[f64]) -> Vec<f64> {
        let mut z = self.b2.clone();
        self.w2.mul_vec_add(h, &mut z);
        softmax(&z)
            .expect("finite logits from finite parameters")
            .to_vec()
    }

    /// Frame-synchronous posteriors for one utterance. The sequence carries
    /// this model's language: that is the space the probabilities live in,
    /// whatever language the audio came from.
    pub fn posteriors(&self, features: &FeatureSequence) -> Result<PosteriorSequence> {
        if features.dim() != self.feature_dim() {
            return Err(Error::Core(xlmap_core::Error::DimensionMismatch {
                expected: self.feature_dim(),
                found: features.dim(),
            }));
        }
        let t_len = features.num_frames();
        let mut probs = Matrix::zeros(t_len, self.num_classes());
        for t in 0..t_len {
            let h = self.hidden(features.frames.row(t));
            probs.row_mut(t).copy_from_slice(&self.class_probs(&h));
        }
        PosteriorSequence::new(self.lang_id.clone(), features.utt_id.clone(), probs)
            .map_err(Error::from)
    }
}

/// Hyperparameters for [`train_toy_am`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyAmOptions {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Fraction of utterances held out for the accuracy metric, `[0, 1)`.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ToyAmOptions {
    fn default() -> Self {
        ToyAmOptions {
            hidden_dim: 16,
            epochs: 30,
            learning_rate: 0.3,
            holdout_fraction: 0.1,
            seed: 7,
        }
    }
}

/// A trained toy model with its holdout diagnostics.
#[derive(Debug, Clone)]
pub struct ToyAmOutcome {
    pub model: ToyAcousticModel,
    /// Frame accuracy on the holdout, or on the training data when the
    /// holdout is empty.
    pub holdout_accuracy: f64,
    pub holdout_utts: usize,
}

/// Trains a frame classifier on `(features, per-frame labels)` pairs with
/// per-utterance SGD on mean cross-entropy. Deterministic in `opts.seed`.
pub fn train_toy_am(
    lang_id: &LangId,
    data: &[(FeatureSequence, Vec<usize>)],
    num_classes: usize,
    opts: &ToyAmOptions,
) -> Result<ToyAmOutcome> {
    if data.is_empty() {
        return Err(Error::Config("toy model needs at least one utterance".into()));
    }
    if num_classes < 2 {
        return Err(Error::Config("toy model needs at least two classes".into()));
    }
    if opts.hidden_dim == 0 || opts.epochs == 0 {
        return Err(Error::Config("hidden_dim and epochs must be positive".into()));
    }
    if !opts.learning_rate.is_finite() || opts.learning_rate <= 0.0 {
        return Err(Error::Config("learning_rate must be positive".into()));
    }
    if !(0.0..1.0).contains(&opts.holdout_fraction) {
        return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
    }
    let dim = data[0].0.dim();
    for (features, labels) in data {
        if features.dim() != dim {
            return Err(Error::Core(xlmap_core::Error::DimensionMismatch {
                expected: dim,
                found: features.dim(),
            }));
        }
        if features.num_frames() != labels.len() {
            return Err(Error::Core(xlmap_core::Error::FrameCountMismatch {
                expected: features.num_frames(),
                found: labels.len(),
            }));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!(
                "frame label {bad} outside the {num_classes}-class inventory"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut model = ToyAcousticModel::init(
        lang_id.clone(),
        dim,
        opts.hidden_dim,
        num_classes,
        &mut rng,
    );

    let mut indices: Vec<usize> = (0..data.len()).collect();
    indices.shuffle(&mut rng);
    let holdout_count = ((opts.holdout_fraction * data.len() as f64) as usize).min(data.len() - 1);
    let (holdout_idx, train_idx) = indices.split_at(holdout_count);

    let mut order = train_idx.to_vec();
    let mut dz = vec![0.0; num_classes];
    let mut dh = vec![0.0; opts.hidden_dim];
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for &u in &order {
            let (features, labels) = &data[u];
            let scale = 1.0 / features.num_frames() as f64;
            let mut g_w1 = Matrix::zeros(opts.hidden_dim, dim);
            let mut g_b1 = vec![0.0; opts.hidden_dim];
            let mut g_w2 = Matrix::zeros(num_classes, opts.hidden_dim);
            let mut g_b2 = vec![0.0; num_classes];
            for (t, &label) in labels.iter().enumerate() {
                let x = features.frames.row(t);
                let h = model.hidden(x);
                let p = model.class_probs(&h);
                for k in 0..num_classes {
                    dz[k] = p[k] - if k == label { 1.0 } else { 0.0 };
                }
                for (g, d) in g_b2.iter_mut().zip(&dz) {
                    *g += d;
                }
                g_w2.add_outer(&dz, &h);
                dh.iter_mut().for_each(|v| *v = 0.0);
                model.w2.mul_tvec_add(&dz, &mut dh);
                for i in 0..opts.hidden_dim {
                    dh[i] *= 1.0 - h[i] * h[i];
                }
                for (g, d) in g_b1.iter_mut().zip(&dh) {
                    *g += d;
                }
                g_w1.add_outer(&dh, x);
            }
            let step = opts.learning_rate * scale;
            for (p, g) in model.w1.data_mut().iter_mut().zip(g_w1.data()) {
                *p -= step * g;
            }
            for (p, g) in model.b1.iter_mut().zip(&g_b1) {
                *p -= step * g;
            }
            for (p, g) in model.w2.data_mut().iter_mut().zip(g_w2.data()) {
                *p -= step * g;
            }
            for (p, g) in model.b2.iter_mut().zip(&g_b2) {
                *p -= step * g;
            }
        }
    }

    let metric_idx = if holdout_idx.is_empty() { train_idx } else { holdout_idx };
    let mut correct = 0usize;
    let mut total = 0usize;
    for &u in metric_idx {
        let (features, labels) = &data[u];
        for (t, &label) in labels.iter().enumerate() {
            let h = model.hidden(features.frames.row(t));
            let p = model.class_probs(&h);
            if argmax(&p)? == label {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(ToyAmOutcome {
        model,
        holdout_accuracy: correct as f64 / total as f64,
        holdout_utts: metric_idx.len(),
    })
}
