//! The multi-encoder single-decoder mapping network.
//!
//! One bidirectional vanilla tanh RNN encoder per source language (input
//! `d_S`, hidden `h`, output `2h`), a single shared bidirectional decoder
//! over the encoder output, and an affine projection into the target token
//! space followed by a per-frame softmax. The output is frame-synchronous
//! with the input: a `T x d_S` posteriorgram maps to a `T x d_A` one.
//!
//! [`MesdModel::backward`] implements backpropagation through time for the
//! per-frame KL loss averaged over frames. Gradients for encoders that did
//! not see the utterance are exactly zero, which the batch logic exploits
//! when combining per-language losses.
//!
//! Parameter traversal order is fixed (encoders sorted by language id, each
//! as forward `w_in, w_rec, bias` then backward likewise; decoder the same;
//! projection weight then bias). Checkpoints, optimiser state and checksums
//! all rely on that order.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{LangId, PosteriorSequence, SourceDims, TokenInventory};
use crate::error::Error;
use crate::math;
use crate::numerics::{kl_frame_unchecked, softmax, Matrix, KL_LOG_EPS};

/// One direction of a bidirectional layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnDirection {
    /// `hidden x input` input weights.
    pub w_in: Matrix,
    /// `hidden x hidden` recurrent weights.
    pub w_rec: Matrix,
    /// `hidden` bias.
    pub bias: Vec<f64>,
}

impl RnnDirection {
    fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        RnnDirection {
            w_in: Matrix::zeros(hidden_dim, input_dim),
            w_rec: Matrix::zeros(hidden_dim, hidden_dim),
            bias: vec![0.0; hidden_dim],
        }
    }

    fn init(input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut dir = RnnDirection::zeros(input_dim, hidden_dim);
        fill_uniform(&mut dir.w_in, input_dim, rng);
        fill_uniform(&mut dir.w_rec, hidden_dim, rng);
        // Biases start at zero.
        dir
    }
}

/// Weight init: uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
fn fill_uniform(m: &mut Matrix, fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / math::sqrt(fan_in as f64);
    for v in m.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
}

/// Parameters of one bidirectional tanh RNN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BiRnnLayerParams {
    input_dim: usize,
    hidden_dim: usize,
    pub forward: RnnDirection,
    pub backward: RnnDirection,
}

/// Cached post-tanh hidden states of one layer, `T x h` per direction.
pub(crate) struct BiRnnStates {
    fwd: Matrix,
    bwd: Matrix,
}

impl BiRnnStates {
    /// Frame-synchronous layer output: `[h_fwd_t ; h_bwd_t]`, `T x 2h`.
    fn concat(&self) -> Matrix {
        let t_len = self.fwd.rows();
        let h = self.fwd.cols();
        let mut out = Matrix::zeros(t_len, 2 * h);
        for t in 0..t_len {
            out.row_mut(t)[..h].copy_from_slice(self.fwd.row(t));
            out.row_mut(t)[h..].copy_from_slice(self.bwd.row(t));
        }
        out
    }
}

impl BiRnnLayerParams {
    fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        BiRnnLayerParams {
            input_dim,
            hidden_dim,
            forward: RnnDirection::zeros(input_dim, hidden_dim),
            backward: RnnDirection::zeros(input_dim, hidden_dim),
        }
    }

    fn init(input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        BiRnnLayerParams {
            input_dim,
            hidden_dim,
            forward: RnnDirection::init(input_dim, hidden_dim, rng),
            backward: RnnDirection::init(input_dim, hidden_dim, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Scalar count: `2 (h d_in + h^2 + h)`.
    pub fn param_count(&self) -> usize {
        2 * (self.hidden_dim * self.input_dim + self.hidden_dim * self.hidden_dim + self.hidden_dim)
    }

    fn run(&self, inputs: &Matrix) -> BiRnnStates {
        let t_len = inputs.rows();
        let h = self.hidden_dim;
        let mut fwd = Matrix::zeros(t_len, h);
        let mut carry = vec![0.0; h];
        for t in 0..t_len {
            let mut a = self.forward.bias.clone();
            self.forward.w_in.mul_vec_add(inputs.row(t), &mut a);
            self.forward.w_rec.mul_vec_add(&carry, &mut a);
            for v in &mut a {
                *v = math::tanh(*v);
            }
            fwd.row_mut(t).copy_from_slice(&a);
            carry = a;
        }
        let mut bwd = Matrix::zeros(t_len, h);
        let mut carry = vec![0.0; h];
        for t in (0..t_len).rev() {
            let mut a = self.backward.bias.clone();
            self.backward.w_in.mul_vec_add(inputs.row(t), &mut a);
            self.backward.w_rec.mul_vec_add(&carry, &mut a);
            for v in &mut a {
                *v = math::tanh(*v);
            }
            bwd.row_mut(t).copy_from_slice(&a);
            carry = a;
        }
        BiRnnStates { fwd, bwd }
    }

    /// BPTT through both directions. `d_out` is `T x 2h`; parameter
    /// gradients accumulate into `grads`; input gradients accumulate into
    /// `d_inputs` when given.
    fn backprop(
        &self,
        inputs: &Matrix,
        states: &BiRnnStates,
        d_out: &Matrix,
        grads: &mut BiRnnLayerParams,
        mut d_inputs: Option<&mut Matrix>,
    ) {
        let t_len = inputs.rows();
        let h = self.hidden_dim;
        let mut carry = vec![0.0; h];
        let mut delta = vec![0.0; h];
        // Forward direction depends on the past; walk time backwards.
        for t in (0..t_len).rev() {
            let ht = states.fwd.row(t);
            for i in 0..h {
                delta[i] = (d_out.row(t)[i] + carry[i]) * (1.0 - ht[i] * ht[i]);
            }
            for (g, d) in grads.forward.bias.iter_mut().zip(&delta) {
                *g += d;
            }
            grads.forward.w_in.add_outer(&delta, inputs.row(t));
            if t > 0 {
                grads.forward.w_rec.add_outer(&delta, states.fwd.row(t - 1));
            }
            if let Some(d_in) = d_inputs.as_mut() {
                self.forward.w_in.mul_tvec_add(&delta, d_in.row_mut(t));
            }
            carry.iter_mut().for_each(|v| *v = 0.0);
            self.forward.w_rec.mul_tvec_add(&delta, &mut carry);
        }
        // Backward direction depends on the future; walk time forwards.
        carry.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..t_len {
            let ht = states.bwd.row(t);
            for i in 0..h {
                delta[i] = (d_out.row(t)[h + i] + carry[i]) * (1.0 - ht[i] * ht[i]);
            }
            for (g, d) in grads.backward.bias.iter_mut().zip(&delta) {
                *g += d;
            }
            grads.backward.w_in.add_outer(&delta, inputs.row(t));
            if t + 1 < t_len {
                grads
                    .backward
                    .w_rec
                    .add_outer(&delta, states.bwd.row(t + 1));
            }
            if let Some(d_in) = d_inputs.as_mut() {
                self.backward.w_in.mul_tvec_add(&delta, d_in.row_mut(t));
            }
            carry.iter_mut().for_each(|v| *v = 0.0);
            self.backward.w_rec.mul_tvec_add(&delta, &mut carry);
        }
    }
}

/// A mapped posteriorgram plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedPosteriors {
    /// Frame-synchronous posteriors in the target token space.
    pub sequence: PosteriorSequence,
    /// Language whose encoder produced this mapping.
    pub source_lang: LangId,
    /// CRC32 over the producing model's parameters.
    pub model_checksum: u32,
}

/// Multi-encoder single-decoder mapping model.
#[derive(Debug, Clone, PartialEq)]
pub struct MesdModel {
    target_lang: LangId,
    target_dim: usize,
    hidden_dim: usize,
    encoders: BTreeMap<LangId, BiRnnLayerParams>,
    decoder: BiRnnLayerParams,
    /// `d_A x 2h` projection from decoder output to target logits.
    proj_weight: Matrix,
    proj_bias: Vec<f64>,
}

struct ForwardCache {
    enc_states: BiRnnStates,
    enc_out: Matrix,
    dec_states: BiRnnStates,
    dec_out: Matrix,
    probs: Matrix,
}

impl MesdModel {
    /// Seeded fan-in uniform initialisation; biases start at zero. Encoders
    /// are created in ascending language order, so a seed pins every weight.
    pub fn init(
        target_inventory: &TokenInventory,
        source_dims: &SourceDims,
        hidden_dim: usize,
        seed: u64,
    ) -> Result<Self, Error> {
        if hidden_dim == 0 {
            return Err(Error::InvalidConfig {
                what: "hidden_dim must be at least 1",
            });
        }
        if source_dims.is_empty() {
            return Err(Error::Empty {
                what: "source language set",
            });
        }
        for &dim in source_dims.values() {
            if dim < 2 {
                return Err(Error::InvalidConfig {
                    what: "source posterior dimension must be at least 2",
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target_dim = target_inventory.size();
        let mut encoders = BTreeMap::new();
        for (lang, &dim) in source_dims.iter() {
            encoders.insert(lang.clone(), BiRnnLayerParams::init(dim, hidden_dim, &mut rng));
        }
        let decoder = BiRnnLayerParams::init(2 * hidden_dim, hidden_dim, &mut rng);
        let mut proj_weight = Matrix::zeros(target_dim, 2 * hidden_dim);
        fill_uniform(&mut proj_weight, 2 * hidden_dim, &mut rng);
        Ok(MesdModel {
            target_lang: target_inventory.lang_id().clone(),
            target_dim,
            hidden_dim,
            encoders,
            decoder,
            proj_weight,
            proj_bias: vec![0.0; target_dim],
        })
    }

    /// Same layout as [`MesdModel::init`] with every parameter zero. Used for
    /// gradient accumulators and checkpoint loading.
    pub fn with_zero_params(
        target_lang: LangId,
        target_dim: usize,
        source_dims: &SourceDims,
        hidden_dim: usize,
    ) -> Result<Self, Error> {
        if hidden_dim == 0 {
            return Err(Error::InvalidConfig {
                what: "hidden_dim must be at least 1",
            });
        }
        if source_dims.is_empty() {
            return Err(Error::Empty {
                what: "source language set",
            });
        }
        let encoders = source_dims
            .iter()
            .map(|(lang, &dim)| (lang.clone(), BiRnnLayerParams::zeros(dim, hidden_dim)))
            .collect();
        Ok(MesdModel {
            target_lang,
            target_dim,
            hidden_dim,
            encoders,
            decoder: BiRnnLayerParams::zeros(2 * hidden_dim, hidden_dim),
            proj_weight: Matrix::zeros(target_dim, 2 * hidden_dim),
            proj_bias: vec![0.0; target_dim],
        })
    }

    pub fn target_lang(&self) -> &LangId {
        &self.target_lang
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn encoder_langs(&self) -> impl Iterator<Item = &LangId> {
        self.encoders.keys()
    }

    pub fn source_dims(&self) -> SourceDims {
        self.encoders
            .iter()
            .map(|(lang, enc)| (lang.clone(), enc.input_dim()))
            .collect()
    }

    pub fn encoder(&self, lang: &LangId) -> Option<&BiRnnLayerParams> {
        self.encoders.get(lang)
    }

    /// Total scalar parameter count, by enumeration of the stored tensors.
    pub fn count_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// All parameter tensors as flat slices in canonical order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for enc in self.encoders.values() {
            push_layer(&mut out, enc);
        }
        push_layer(&mut out, &self.decoder);
        out.push(self.proj_weight.data());
        out.push(&self.proj_bias);
        out
    }

    /// Mutable view matching [`MesdModel::param_slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for enc in self.encoders.values_mut() {
            push_layer_mut(&mut out, enc);
        }
        push_layer_mut(&mut out, &mut self.decoder);
        out.push(self.proj_weight.data_mut());
        out.push(&mut self.proj_bias);
        out
    }

    /// Model of identical shape with all parameters zero.
    pub fn zeros_like(&self) -> MesdModel {
        MesdModel::with_zero_params(
            self.target_lang.clone(),
            self.target_dim,
            &self.source_dims(),
            self.hidden_dim,
        )
        .expect("shape of an existing model is valid")
    }

    /// `self += scale * other`, in parameter space.
    pub fn add_scaled(&mut self, other: &MesdModel, scale: f64) {
        let theirs = other.param_slices();
        for (mine, other) in self.param_slices_mut().into_iter().zip(theirs) {
            for (m, o) in mine.iter_mut().zip(other) {
                *m += scale * o;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for slice in self.param_slices_mut() {
            for v in slice {
                *v *= factor;
            }
        }
    }

    /// Global L2 norm over all parameters.
    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0;
        for slice in self.param_slices() {
            for v in slice {
                acc += v * v;
            }
        }
        math::sqrt(acc)
    }

    /// CRC32 over the little-endian bytes of all parameters in canonical
    /// order. Identifies which weights produced a mapped posteriorgram.
    pub fn checksum(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        for slice in self.param_slices() {
            for v in slice {
                hasher.update(&v.to_le_bytes());
            }
        }
        hasher.finalize()
    }

    fn encoder_for(&self, source_lang: &LangId) -> Result<&BiRnnLayerParams, Error> {
        self.encoders
            .get(source_lang)
            .ok_or_else(|| Error::NoEncoderForLanguage {
                lang: source_lang.clone(),
            })
    }

    fn run_forward(&self, enc: &BiRnnLayerParams, inputs: &Matrix) -> ForwardCache {
        let enc_states = enc.run(inputs);
        let enc_out = enc_states.concat();
        let dec_states = self.decoder.run(&enc_out);
        let dec_out = dec_states.concat();
        let t_len = inputs.rows();
        let mut probs = Matrix::zeros(t_len, self.target_dim);
        for t in 0..t_len {
            let mut z = self.proj_bias.clone();
            self.proj_weight.mul_vec_add(dec_out.row(t), &mut z);
            let row = softmax(&z).expect("finite logits from finite parameters");
            probs.row_mut(t).copy_from_slice(&row);
        }
        ForwardCache {
            enc_states,
            enc_out,
            dec_states,
            dec_out,
            probs,
        }
    }

    fn check_input(&self, source_lang: &LangId, input: &PosteriorSequence) -> Result<&BiRnnLayerParams, Error> {
        let enc = self.encoder_for(source_lang)?;
        if input.num_classes() != enc.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: enc.input_dim(),
                found: input.num_classes(),
            });
        }
        Ok(enc)
    }

    /// Maps a source posteriorgram into the target token space. The output
    /// has the same frame count as the input and stochastic rows.
    pub fn forward(
        &self,
        source_lang: &LangId,
        input: &PosteriorSequence,
    ) -> Result<MappedPosteriors, Error> {
        let enc = self.check_input(source_lang, input)?;
        let cache = self.run_forward(enc, input.frames());
        let sequence = PosteriorSequence::new(
            self.target_lang.clone(),
            input.utt_id().to_string(),
            cache.probs,
        )?;
        Ok(MappedPosteriors {
            sequence,
            source_lang: source_lang.clone(),
            model_checksum: self.checksum(),
        })
    }

    /// Mean per-frame KL loss of mapping `input` against `target`, no
    /// gradients.
    pub fn loss(
        &self,
        source_lang: &LangId,
        input: &PosteriorSequence,
        target: &PosteriorSequence,
    ) -> Result<f64, Error> {
        let (sum, frames) = self.loss_sum(source_lang, input, target)?;
        Ok(sum / frames as f64)
    }

    /// Summed per-frame KL loss and the frame count; building block for
    /// dataset-level averages.
    pub(crate) fn loss_sum(
        &self,
        source_lang: &LangId,
        input: &PosteriorSequence,
        target: &PosteriorSequence,
    ) -> Result<(f64, usize), Error> {
        let enc = self.check_target(source_lang, input, target)?;
        let cache = self.run_forward(enc, input.frames());
        let mut sum = 0.0;
        for t in 0..input.frame_count() {
            sum += kl_frame_unchecked(target.row(t), cache.probs.row(t));
        }
        Ok((sum, input.frame_count()))
    }

    fn check_target(
        &self,
        source_lang: &LangId,
        input: &PosteriorSequence,
        target: &PosteriorSequence,
    ) -> Result<&BiRnnLayerParams, Error> {
        let enc = self.check_input(source_lang, input)?;
        if target.num_classes() != self.target_dim {
            return Err(Error::DimensionMismatch {
                expected: self.target_dim,
                found: target.num_classes(),
            });
        }
        if target.frame_count() != input.frame_count() {
            return Err(Error::FrameCountMismatch {
                expected: input.frame_count(),
                found: target.frame_count(),
            });
        }
        Ok(enc)
    }

    /// Loss and gradients for one utterance, averaged over its frames.
    ///
    /// The gradient comes back as a parameter-shaped model. Encoders other
    /// than `source_lang` receive exactly zero gradient.
    pub fn backward(
        &self,
        source_lang: &LangId,
        input: &PosteriorSequence,
        target: &PosteriorSequence,
    ) -> Result<(f64, MesdModel), Error> {
        let mut grads = self.zeros_like();
        let (sum, frames) = self.accumulate_gradients(source_lang, input, target, &mut grads)?;
        let scale = 1.0 / frames as f64;
        grads.scale(scale);
        Ok((sum * scale, grads))
    }

    /// Accumulates gradients of the summed (not averaged) frame loss into
    /// `grads` and returns `(loss_sum, frames)`. Used directly by the batch
    /// logic, which normalises once per language over the whole batch.
    pub(crate) fn accumulate_gradients(
        &self,
        source_lang: &LangId,
        input: &PosteriorSequence,
        target: &PosteriorSequence,
        grads: &mut MesdModel,
    ) -> Result<(f64, usize), Error> {
        let enc = self.check_target(source_lang, input, target)?;
        let t_len = input.frame_count();
        let d = self.target_dim;
        let cache = self.run_forward(enc, input.frames());

        let mut loss_sum = 0.0;
        let mut d_dec_out = Matrix::zeros(t_len, 2 * self.hidden_dim);
        let mut dz = vec![0.0; d];
        for t in 0..t_len {
            let p = cache.probs.row(t);
            let q = target.row(t);
            loss_sum += kl_frame_unchecked(q, p);
            // dL/dp_k = -q_k / p_k where p_k is above the clamp, else 0;
            // through softmax: dL/dz_j = p_j (g_j - sum_k g_k p_k).
            let mut g_dot = 0.0;
            for k in 0..d {
                let g = if p[k] > KL_LOG_EPS { -q[k] / p[k] } else { 0.0 };
                dz[k] = g;
                g_dot += g * p[k];
            }
            for k in 0..d {
                dz[k] = p[k] * (dz[k] - g_dot);
            }
            for (g, v) in grads.proj_bias.iter_mut().zip(&dz) {
                *g += v;
            }
            grads.proj_weight.add_outer(&dz, cache.dec_out.row(t));
            self.proj_weight.mul_tvec_add(&dz, d_dec_out.row_mut(t));
        }

        let mut d_enc_out = Matrix::zeros(t_len, 2 * self.hidden_dim);
        self.decoder.backprop(
            &cache.enc_out,
            &cache.dec_states,
            &d_dec_out,
            &mut grads.decoder,
            Some(&mut d_enc_out),
        );
        let enc_grads = grads
            .encoders
            .get_mut(source_lang)
            .expect("gradient model shares the encoder layout");
        enc.backprop(
            input.frames(),
            &cache.enc_states,
            &d_enc_out,
            enc_grads,
            None,
        );
        Ok((loss_sum, t_len))
    }
}

fn push_layer<'a>(out: &mut Vec<&'a [f64]>, layer: &'a BiRnnLayerParams) {
    out.push(layer.forward.w_in.data());
    out.push(layer.forward.w_rec.data());
    out.push(&layer.forward.bias);
    out.push(layer.backward.w_in.data());
    out.push(layer.backward.w_rec.data());
    out.push(&layer.backward.bias);
}

fn push_layer_mut<'a>(out: &mut Vec<&'a mut [f64]>, layer: &'a mut BiRnnLayerParams) {
    out.push(layer.forward.w_in.data_mut());
    out.push(layer.forward.w_rec.data_mut());
    out.push(&mut layer.forward.bias);
    out.push(layer.backward.w_in.data_mut());
    out.push(layer.backward.w_rec.data_mut());
    out.push(&mut layer.backward.bias);
}
