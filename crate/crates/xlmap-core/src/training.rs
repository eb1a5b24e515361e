//! Training loop for the mapping model: per-language KL losses combined by
//! mean or rank-sum weights, SGD or Adam updates, global gradient norm
//! clipping, and a deterministic dev split used for model selection.
//!
//! Rank-sum weighting sorts the per-language losses in decreasing order and
//! gives rank `r` the weight `2 (K + 1 - r) / (K (K + 1))`, so the language
//! currently hardest to map dominates the update. Weights are recomputed for
//! every batch from that batch's losses. Ties rank in ascending language id.
//!
//! The per-epoch history reports frame-weighted per-language losses, i.e.
//! summed frame KL over the epoch divided by total frames. That aggregate
//! does not depend on how utterances were shuffled into batches, so a run
//! with learning rate zero produces a perfectly flat history.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::borrow::Borrow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{LangId, PosteriorSequence};
use crate::error::Error;
use crate::math;
use crate::mesd::MesdModel;

/// Gradient descent flavour. Learning rate lives in [`TrainConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam_default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// How per-language losses combine into the aggregate loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Weighting {
    /// Uniform `1/K`.
    Mean,
    /// Rank-sum weights favouring the worst language.
    RankSum,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Nonnegative; zero leaves parameters untouched (useful as a probe).
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub weighting: Weighting,
    /// Global L2 clip threshold; zero or negative disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Fraction of utterances held out for model selection, `[0, 1)`.
    pub dev_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: Optimizer::adam_default(),
            weighting: Weighting::RankSum,
            clip_norm: 5.0,
            seed: 42,
            dev_fraction: 1.0 / 30.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig {
                what: "epochs must be at least 1",
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig {
                what: "batch_size must be at least 1",
            });
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig {
                what: "learning_rate must be finite and nonnegative",
            });
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::InvalidConfig {
                what: "dev_fraction must lie in [0, 1)",
            });
        }
        if let Optimizer::Adam { beta1, beta2, epsilon } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || epsilon <= 0.0 {
                return Err(Error::InvalidConfig {
                    what: "adam hyperparameters out of range",
                });
            }
        }
        Ok(())
    }
}

/// One language's slot in a weighting decision.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LanguageWeight {
    pub lang: LangId,
    pub loss: f64,
    /// 1-based; rank 1 carries the largest loss.
    pub rank: usize,
    pub weight: f64,
}

/// Per-language losses with their ranks and combination weights. Entries are
/// ordered by rank; weights always sum to 1.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WeightingState {
    entries: Vec<LanguageWeight>,
}

impl WeightingState {
    pub fn for_mode(mode: Weighting, losses: &BTreeMap<LangId, f64>) -> Result<Self, Error> {
        match mode {
            Weighting::Mean => WeightingState::mean(losses),
            Weighting::RankSum => WeightingState::rank_sum(losses),
        }
    }

    /// Uniform weights; ranking is still recorded for the history.
    pub fn mean(losses: &BTreeMap<LangId, f64>) -> Result<Self, Error> {
        let mut state = WeightingState::ranked(losses)?;
        let k = state.entries.len() as f64;
        for e in &mut state.entries {
            e.weight = 1.0 / k;
        }
        Ok(state)
    }

    /// Rank-sum weights: rank `r` of `K` gets `2 (K + 1 - r) / (K (K + 1))`.
    pub fn rank_sum(losses: &BTreeMap<LangId, f64>) -> Result<Self, Error> {
        let mut state = WeightingState::ranked(losses)?;
        let k = state.entries.len() as f64;
        for e in &mut state.entries {
            e.weight = 2.0 * (k + 1.0 - e.rank as f64) / (k * (k + 1.0));
        }
        Ok(state)
    }

    fn ranked(losses: &BTreeMap<LangId, f64>) -> Result<Self, Error> {
        if losses.is_empty() {
            return Err(Error::Empty { what: "loss map" });
        }
        if losses.values().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "loss map" });
        }
        // BTreeMap iteration is already ascending in language, so a stable
        // sort on descending loss leaves ties in ascending language order.
        let mut entries: Vec<LanguageWeight> = losses
            .iter()
            .map(|(lang, &loss)| LanguageWeight {
                lang: lang.clone(),
                loss,
                rank: 0,
                weight: 0.0,
            })
            .collect();
        entries.sort_by(|a, b| b.loss.partial_cmp(&a.loss).expect("finite losses"));
        for (i, e) in entries.iter_mut().enumerate() {
            e.rank = i + 1;
        }
        Ok(WeightingState { entries })
    }

    /// Entries ordered by rank (worst language first).
    pub fn entries(&self) -> &[LanguageWeight] {
        &self.entries
    }

    pub fn weight_map(&self) -> BTreeMap<LangId, f64> {
        self.entries
            .iter()
            .map(|e| (e.lang.clone(), e.weight))
            .collect()
    }

    pub fn weight(&self, lang: &LangId) -> Option<f64> {
        self.entries.iter().find(|e| &e.lang == lang).map(|e| e.weight)
    }

    /// The aggregate loss `sum_k w_k L_k`.
    pub fn combined_loss(&self) -> f64 {
        self.entries.iter().map(|e| e.weight * e.loss).sum()
    }
}

/// Convenience wrapper returning just the weight map.
pub fn rank_sum_weights(losses: &BTreeMap<LangId, f64>) -> Result<BTreeMap<LangId, f64>, Error> {
    Ok(WeightingState::rank_sum(losses)?.weight_map())
}

/// One utterance with target posteriors and one posteriorgram per source
/// language, all frame-synchronous.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedUtterance {
    pub utt_id: String,
    pub target: PosteriorSequence,
    pub sources: BTreeMap<LangId, PosteriorSequence>,
}

impl PairedUtterance {
    pub fn new(
        utt_id: String,
        target: PosteriorSequence,
        sources: BTreeMap<LangId, PosteriorSequence>,
    ) -> Result<Self, Error> {
        if sources.is_empty() {
            return Err(Error::Empty { what: "source map" });
        }
        for seq in sources.values() {
            if seq.frame_count() != target.frame_count() {
                return Err(Error::FrameCountMismatch {
                    expected: target.frame_count(),
                    found: seq.frame_count(),
                });
            }
        }
        Ok(PairedUtterance {
            utt_id,
            target,
            sources,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.target.frame_count()
    }
}

/// Loss breakdown and combined gradient for one batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Aggregate loss `sum_k w_k L_k`.
    pub total: f64,
    /// Per-language mean frame loss over the batch.
    pub per_lang: BTreeMap<LangId, f64>,
    /// Weights used to combine languages, derived from this batch.
    pub weighting: WeightingState,
    /// Total frames in the batch.
    pub frames: usize,
    /// Gradient of `total` w.r.t. the parameters, parameter-shaped.
    pub gradients: MesdModel,
}

/// Computes the aggregate batch loss and its gradient. Every utterance must
/// carry posteriors for every encoder language of `model`.
pub fn batch_loss<U: Borrow<PairedUtterance>>(
    model: &MesdModel,
    batch: &[U],
    weighting: Weighting,
) -> Result<BatchLoss, Error> {
    if batch.is_empty() {
        return Err(Error::Empty { what: "batch" });
    }
    let langs: Vec<LangId> = model.encoder_langs().cloned().collect();
    let mut frames = 0usize;
    let mut sums: BTreeMap<LangId, f64> = langs.iter().map(|l| (l.clone(), 0.0)).collect();
    let mut grads: BTreeMap<LangId, MesdModel> = langs
        .iter()
        .map(|l| (l.clone(), model.zeros_like()))
        .collect();
    for u in batch {
        let u = u.borrow();
        frames += u.frame_count();
        for lang in &langs {
            let source = u.sources.get(lang).ok_or_else(|| Error::MissingSource {
                lang: lang.clone(),
                utt_id: u.utt_id.clone(),
            })?;
            let g = grads.get_mut(lang).expect("initialised above");
            let (sum, _) = model.accumulate_gradients(lang, source, &u.target, g)?;
            *sums.get_mut(lang).expect("initialised above") += sum;
        }
    }
    let per_lang: BTreeMap<LangId, f64> = sums
        .iter()
        .map(|(l, s)| (l.clone(), s / frames as f64))
        .collect();
    let weighting = WeightingState::for_mode(weighting, &per_lang)?;
    let mut combined = model.zeros_like();
    for lang in &langs {
        let w = weighting.weight(lang).expect("weighting covers all languages");
        combined.add_scaled(&grads[lang], w / frames as f64);
    }
    Ok(BatchLoss {
        total: weighting.combined_loss(),
        per_lang,
        weighting,
        frames,
        gradients: combined,
    })
}

/// One line of training history. Epoch 0 describes the initial parameters
/// before any update.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    /// Aggregate train loss under the configured weighting.
    pub train_loss: f64,
    /// Aggregate dev loss; equals the train numbers when the dev split is
    /// empty.
    pub dev_loss: f64,
    pub per_lang_train: BTreeMap<LangId, f64>,
    pub per_lang_dev: BTreeMap<LangId, f64>,
    /// Weights implied by the epoch-level train losses.
    pub weights: BTreeMap<LangId, f64>,
}

/// Result of [`train`]: the selected model and the full history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest dev loss (earliest wins
    /// ties), which may be the untouched initial model.
    pub model: MesdModel,
    pub history: Vec<EpochRecord>,
}

enum OptState {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
    },
}

impl OptState {
    fn new(opt: &Optimizer, params: usize) -> Self {
        match *opt {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam { beta1, beta2, epsilon } => OptState::Adam {
                beta1,
                beta2,
                epsilon,
                m: alloc::vec![0.0; params],
                v: alloc::vec![0.0; params],
                t: 0,
            },
        }
    }

    fn step(&mut self, model: &mut MesdModel, grads: &MesdModel, lr: f64) {
        let gs = grads.param_slices();
        match self {
            OptState::Sgd => {
                for (ps, g) in model.param_slices_mut().into_iter().zip(gs) {
                    for (p, g) in ps.iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
            }
            OptState::Adam {
                beta1,
                beta2,
                epsilon,
                m,
                v,
                t,
            } => {
                *t += 1;
                let bc1 = 1.0 - math::powi(*beta1, *t as i32);
                let bc2 = 1.0 - math::powi(*beta2, *t as i32);
                let mut cursor = 0usize;
                for (ps, g) in model.param_slices_mut().into_iter().zip(gs) {
                    for (p, g) in ps.iter_mut().zip(g) {
                        let mi = &mut m[cursor];
                        let vi = &mut v[cursor];
                        *mi = *beta1 * *mi + (1.0 - *beta1) * g;
                        *vi = *beta2 * *vi + (1.0 - *beta2) * g * g;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *p -= lr * m_hat / (math::sqrt(v_hat) + *epsilon);
                        cursor += 1;
                    }
                }
            }
        }
    }
}

/// Frame-weighted per-language mean losses over a set of utterances.
fn eval_losses(
    model: &MesdModel,
    corpus: &[PairedUtterance],
    indices: &[usize],
) -> Result<BTreeMap<LangId, f64>, Error> {
    let langs: Vec<LangId> = model.encoder_langs().cloned().collect();
    let mut sums: BTreeMap<LangId, f64> = langs.iter().map(|l| (l.clone(), 0.0)).collect();
    let mut frames = 0usize;
    for &i in indices {
        let u = &corpus[i];
        frames += u.frame_count();
        for lang in &langs {
            let source = u.sources.get(lang).ok_or_else(|| Error::MissingSource {
                lang: lang.clone(),
                utt_id: u.utt_id.clone(),
            })?;
            let (sum, _) = model.loss_sum(lang, source, &u.target)?;
            *sums.get_mut(lang).expect("initialised above") += sum;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(l, s)| (l, s / frames as f64))
        .collect())
}

fn validate_pairing(model: &MesdModel, u: &PairedUtterance) -> Result<(), Error> {
    if u.target.num_classes() != model.target_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.target_dim(),
            found: u.target.num_classes(),
        });
    }
    for (lang, dim) in model.source_dims() {
        let source = u.sources.get(&lang).ok_or_else(|| Error::MissingSource {
            lang: lang.clone(),
            utt_id: u.utt_id.clone(),
        })?;
        if source.num_classes() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: source.num_classes(),
            });
        }
    }
    Ok(())
}

/// Trains `model` on `corpus` and returns the dev-selected parameters with
/// the per-epoch history. Entirely deterministic given `config.seed`.
pub fn train(
    model: MesdModel,
    corpus: &[PairedUtterance],
    config: &TrainConfig,
) -> Result<TrainOutcome, Error> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty { what: "corpus" });
    }
    for u in corpus {
        validate_pairing(&model, u)?;
    }

    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut indices: Vec<usize> = (0..corpus.len()).collect();
    indices.shuffle(&mut rng);
    let dev_count = ((config.dev_fraction * corpus.len() as f64) as usize).min(corpus.len() - 1);
    let (dev_idx, train_idx) = indices.split_at(dev_count);

    let record_for = |epoch: usize,
                      model: &MesdModel|
     -> Result<(EpochRecord, f64), Error> {
        let tr = eval_losses(model, corpus, train_idx)?;
        let dv = if dev_idx.is_empty() {
            tr.clone()
        } else {
            eval_losses(model, corpus, dev_idx)?
        };
        let ws = WeightingState::for_mode(config.weighting, &tr)?;
        let dev_ws = WeightingState::for_mode(config.weighting, &dv)?;
        let dev_loss = dev_ws.combined_loss();
        Ok((
            EpochRecord {
                epoch,
                train_loss: ws.combined_loss(),
                dev_loss,
                per_lang_train: tr,
                per_lang_dev: dv,
                weights: ws.weight_map(),
            },
            dev_loss,
        ))
    };

    let mut history = Vec::with_capacity(config.epochs + 1);
    let (initial, mut best_dev) = record_for(0, &model)?;
    history.push(initial);
    let mut best = model.clone();

    let mut opt = OptState::new(&config.optimizer, model.count_params());
    let mut order: Vec<usize> = train_idx.to_vec();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PairedUtterance> = chunk.iter().map(|&i| &corpus[i]).collect();
            let bl = batch_loss(&model, &batch, config.weighting)?;
            if !bl.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            let mut grads = bl.gradients;
            if config.clip_norm > 0.0 {
                let norm = grads.l2_norm();
                if norm > config.clip_norm {
                    grads.scale(config.clip_norm / norm);
                }
            }
            opt.step(&mut model, &grads, config.learning_rate);
        }
        let (record, dev_loss) = record_for(epoch, &model)?;
        if !dev_loss.is_finite() || !record.train_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        history.push(record);
        if dev_loss < best_dev {
            best_dev = dev_loss;
            best = model.clone();
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
    })
}
