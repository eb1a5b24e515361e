//! End-to-end checks of the training loop on a small learnable task.
//!
//! The synthetic data hides a latent class sequence behind fixed label
//! permutations: the target posteriors peak at `perm_t(c)` while each source
//! peaks at its own `perm_s(c)`. A mapping model only has to learn a
//! per-class relabelling, so a few hundred optimiser steps cut the loss
//! deeply, while everything stays small enough for the suite to run in
//! seconds.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xlmap_core::corpus::{LangId, PosteriorSequence, SourceDims, TokenInventory};
use xlmap_core::mesd::MesdModel;
use xlmap_core::numerics::Matrix;
use xlmap_core::training::{
    batch_loss, train, Optimizer, PairedUtterance, TrainConfig, Weighting,
};

const D: usize = 6;

fn peaked_row(class: usize, mass: f64) -> Vec<f64> {
    let mut row = vec![(1.0 - mass) / (D - 1) as f64; D];
    row[class] = mass;
    row
}

fn sequence(lang: &str, utt: &str, classes: &[usize], mass: f64) -> PosteriorSequence {
    let flat: Vec<f64> = classes.iter().flat_map(|&c| peaked_row(c, mass)).collect();
    let frames = Matrix::from_vec(classes.len(), D, flat).unwrap();
    PosteriorSequence::new(LangId::from(lang), utt.into(), frames).unwrap()
}

/// Markov latent classes with self-transition 0.6.
fn latent_classes(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    let mut cur = rng.random_range(0..D);
    for _ in 0..len {
        out.push(cur);
        if rng.random_range(0.0..1.0) >= 0.6 {
            let step = rng.random_range(1..D);
            cur = (cur + step) % D;
        }
    }
    out
}

fn build_corpus(n: usize, seed: u64) -> Vec<PairedUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perm_t: Vec<usize> = vec![2, 0, 4, 1, 5, 3];
    let perm_a: Vec<usize> = vec![5, 3, 1, 0, 2, 4];
    let perm_b: Vec<usize> = vec![0, 2, 1, 4, 3, 5];
    (0..n)
        .map(|i| {
            let len = rng.random_range(5..12);
            let classes = latent_classes(len, &mut rng);
            let tgt: Vec<usize> = classes.iter().map(|&c| perm_t[c]).collect();
            let src_a: Vec<usize> = classes.iter().map(|&c| perm_a[c]).collect();
            // Source b carries occasional label noise.
            let src_b: Vec<usize> = classes
                .iter()
                .map(|&c| {
                    if rng.random_range(0.0..1.0) < 0.1 {
                        rng.random_range(0..D)
                    } else {
                        perm_b[c]
                    }
                })
                .collect();
            let utt = format!("u{i:03}");
            let sources: BTreeMap<LangId, PosteriorSequence> = [
                (LangId::from("srca"), sequence("srca", &utt, &src_a, 0.85)),
                (LangId::from("srcb"), sequence("srcb", &utt, &src_b, 0.85)),
            ]
            .into_iter()
            .collect();
            PairedUtterance::new(utt.clone(), sequence("tgt", &utt, &tgt, 0.9), sources).unwrap()
        })
        .collect()
}

fn inventory() -> TokenInventory {
    let tokens: Vec<String> = (0..D)
        .map(|i| if i == 0 { "<blk>".into() } else { format!("t{i}") })
        .collect();
    TokenInventory::new(LangId::from("tgt"), tokens, 0, None).unwrap()
}

fn source_dims() -> SourceDims {
    [(LangId::from("srca"), D), (LangId::from("srcb"), D)]
        .into_iter()
        .collect()
}

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 12,
        batch_size: 4,
        learning_rate: 3e-3,
        optimizer: Optimizer::adam_default(),
        weighting: Weighting::RankSum,
        clip_norm: 5.0,
        seed: 7,
        dev_fraction: 0.1,
    }
}

#[test]
fn training_halves_dev_loss_on_learnable_mapping() {
    let corpus = build_corpus(60, 99);
    let model = MesdModel::init(&inventory(), &source_dims(), 8, 21).unwrap();
    let outcome = train(model, &corpus, &config()).unwrap();

    assert_eq!(outcome.history.len(), 13);
    assert_eq!(outcome.history[0].epoch, 0);
    let initial = outcome.history[0].dev_loss;
    let last = outcome.history.last().unwrap();
    assert!(
        last.dev_loss <= 0.5 * initial,
        "dev loss {initial} -> {}",
        last.dev_loss
    );
    // Weights recorded per epoch always form a distribution.
    for record in &outcome.history {
        let sum: f64 = record.weights.values().sum();
        assert!((sum - 1.0).abs() < 1e-9, "epoch {}", record.epoch);
        assert!(record.train_loss.is_finite() && record.dev_loss.is_finite());
    }
    // The selected model is usable with data from a single source.
    let mapped = outcome
        .model
        .forward(&LangId::from("srca"), &corpus[0].sources[&LangId::from("srca")])
        .unwrap();
    assert_eq!(mapped.sequence.frame_count(), corpus[0].frame_count());
}

#[test]
fn training_is_bitwise_deterministic() {
    let corpus = build_corpus(24, 5);
    let model = MesdModel::init(&inventory(), &source_dims(), 6, 3).unwrap();
    let mut cfg = config();
    cfg.epochs = 4;
    let a = train(model.clone(), &corpus, &cfg).unwrap();
    let b = train(model, &corpus, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.checksum(), b.model.checksum());
}

#[test]
fn zero_learning_rate_means_flat_history_and_untouched_model() {
    let corpus = build_corpus(20, 8);
    let model = MesdModel::init(&inventory(), &source_dims(), 6, 17).unwrap();
    let mut cfg = config();
    cfg.epochs = 3;
    cfg.learning_rate = 0.0;
    let outcome = train(model.clone(), &corpus, &cfg).unwrap();
    assert_eq!(outcome.model, model);
    let first = &outcome.history[0];
    for record in &outcome.history[1..] {
        assert_eq!(record.train_loss, first.train_loss);
        assert_eq!(record.dev_loss, first.dev_loss);
        assert_eq!(record.per_lang_train, first.per_lang_train);
    }
}

#[test]
fn sgd_also_reduces_loss() {
    let corpus = build_corpus(40, 13);
    let model = MesdModel::init(&inventory(), &source_dims(), 8, 2).unwrap();
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd,
        learning_rate: 0.5,
        weighting: Weighting::Mean,
        epochs: 12,
        ..config()
    };
    let outcome = train(model, &corpus, &cfg).unwrap();
    let initial = outcome.history[0].dev_loss;
    let last = outcome.history.last().unwrap().dev_loss;
    assert!(last < initial, "{initial} -> {last}");
}

#[test]
fn batch_loss_mean_equals_average_and_rank_sum_reweights() {
    let corpus = build_corpus(6, 31);
    let model = MesdModel::init(&inventory(), &source_dims(), 6, 11).unwrap();
    let mean = batch_loss(&model, &corpus, Weighting::Mean).unwrap();
    let by_hand: f64 = mean.per_lang.values().sum::<f64>() / mean.per_lang.len() as f64;
    assert!((mean.total - by_hand).abs() < 1e-12);

    let ranked = batch_loss(&model, &corpus, Weighting::RankSum).unwrap();
    assert_eq!(ranked.per_lang, mean.per_lang);
    let expected: f64 = ranked
        .weighting
        .entries()
        .iter()
        .map(|e| e.weight * e.loss)
        .sum();
    assert!((ranked.total - expected).abs() < 1e-12);
    // K=2 rank-sum weights are 2/3 and 1/3.
    assert!((ranked.weighting.entries()[0].weight - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn batch_gradient_matches_weighted_per_language_gradients() {
    // The combined gradient must be the weight-scaled sum of per-language
    // gradients; verify against backward() run separately per language.
    let corpus = build_corpus(3, 77);
    let model = MesdModel::init(&inventory(), &source_dims(), 5, 19).unwrap();
    let bl = batch_loss(&model, &corpus, Weighting::RankSum).unwrap();

    let mut expected = model.zeros_like();
    for lang in [LangId::from("srca"), LangId::from("srcb")] {
        let mut lang_grads = model.zeros_like();
        let mut frames = 0usize;
        for u in &corpus {
            let (_, grads) = model.backward(&lang, &u.sources[&lang], &u.target).unwrap();
            // backward() averages per utterance; undo to recover sums.
            let t = u.frame_count();
            lang_grads.add_scaled(&grads, t as f64);
            frames += t;
        }
        let w = bl.weighting.weight(&lang).unwrap();
        expected.add_scaled(&lang_grads, w / frames as f64);
    }
    let got = bl.gradients.param_slices();
    let want = expected.param_slices();
    for (g, w) in got.iter().zip(&want) {
        for (a, b) in g.iter().zip(*w) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn train_rejects_bad_inputs() {
    let model = MesdModel::init(&inventory(), &source_dims(), 4, 1).unwrap();
    assert!(train(model.clone(), &[], &config()).is_err());

    // Missing source language.
    let mut corpus = build_corpus(2, 3);
    corpus[0].sources.remove(&LangId::from("srcb"));
    assert!(train(model, &corpus, &config()).is_err());
}
