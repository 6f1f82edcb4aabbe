//! Shared encoder plus one affine + log-softmax head per language.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_SCHEMA_VERSION};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss, Alphabet, LabelSequence, LogProbLattice};
use crate::diffcore::{
    backward_layer, forward_layer, ForwardCache, LayerSpec, Matrix, NamedParams,
};
use crate::rng::rng_for;
use crate::tasks::Utterance;
use crate::{Error, Result};

/// One utterance's acoustic frames, `T × feature_dim`.
pub type FeatureSequence = Matrix;

pub const ENCODER_PREFIX: &str = "enc.";
pub const HEAD_PREFIX: &str = "head.";

/// Encoder layer stack.
///
/// The default is `frame_stack(stride) → affine → tanh → recurrent_bidi`,
/// with `hidden_dim` units shared between the two recurrent directions. It is
/// a desk-scale stand-in for a convolutional front end with downsampling
/// followed by a deep bidirectional LSTM (for example six BLSTM layers of 360
/// cells per direction); larger `hidden_dim` values scale it up, but the
/// manual backward passes here only cover the vanilla tanh recurrence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub subsample_stride: usize,
    pub layers: Vec<LayerSpec>,
}

impl EncoderConfig {
    pub const DEFAULT_HIDDEN: usize = 64;
    pub const DEFAULT_STRIDE: usize = 2;

    pub fn new(feature_dim: usize, hidden_dim: usize, subsample_stride: usize) -> Result<Self> {
        let stacked = feature_dim * subsample_stride;
        let cfg = Self {
            feature_dim,
            hidden_dim,
            subsample_stride,
            layers: vec![
                LayerSpec::frame_stack("enc.0", feature_dim, subsample_stride),
                LayerSpec::affine("enc.1", stacked, hidden_dim),
                LayerSpec::tanh("enc.2", hidden_dim),
                LayerSpec::recurrent_bidi("enc.3", hidden_dim, hidden_dim),
            ],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn desk_default(feature_dim: usize) -> Result<Self> {
        Self::new(feature_dim, Self::DEFAULT_HIDDEN, Self::DEFAULT_STRIDE)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::dim("encoder has no layers"))?;
        if first.input_dim != self.feature_dim {
            return Err(Error::dim(format!(
                "first layer `{}` consumes {} features, config says {}",
                first.name, first.input_dim, self.feature_dim
            )));
        }
        let mut stride = 1;
        for (i, l) in self.layers.iter().enumerate() {
            l.validate()?;
            if !l.name.starts_with(ENCODER_PREFIX) {
                return Err(Error::dim(format!(
                    "encoder layer `{}` must start with `enc.`",
                    l.name
                )));
            }
            if i > 0 && self.layers[i - 1].output_dim != l.input_dim {
                return Err(Error::dim(format!(
                    "layer `{}` outputs {} but `{}` expects {}",
                    self.layers[i - 1].name,
                    self.layers[i - 1].output_dim,
                    l.name,
                    l.input_dim
                )));
            }
            stride *= l.stride();
        }
        let last = self.layers.last().expect("non-empty");
        if last.output_dim != self.hidden_dim {
            return Err(Error::dim(format!(
                "encoder outputs {} but hidden_dim is {}",
                last.output_dim, self.hidden_dim
            )));
        }
        if stride != self.subsample_stride {
            return Err(Error::dim(format!(
                "layers subsample by {stride} but subsample_stride is {}",
                self.subsample_stride
            )));
        }
        Ok(())
    }

    /// Encoder output frames for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        self.layers.iter().fold(frames, |t, l| l.output_rows(t))
    }

    pub fn init_params(&self, seed: u64) -> NamedParams {
        let mut rng = rng_for(seed, "encoder");
        let mut out = NamedParams::new();
        for l in &self.layers {
            out.overwrite_from(&l.init_params(&mut rng));
        }
        out
    }
}

/// Activations of every encoder layer for one input.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    layers: Vec<ForwardCache>,
}

/// Loss and gradients for one utterance or a summed batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrads {
    pub loss: f64,
    pub encoder: NamedParams,
    pub head: NamedParams,
}

impl LossGrads {
    fn accumulate(&mut self, other: &LossGrads) -> Result<()> {
        self.loss += other.loss;
        self.encoder.axpy(1.0, &other.encoder)?;
        self.head.axpy(1.0, &other.head)
    }

    pub fn scaled(&self, s: f64) -> LossGrads {
        LossGrads {
            loss: self.loss * s,
            encoder: self.encoder.scale(s),
            head: self.head.scale(s),
        }
    }
}

fn head_names(lang: &str) -> (String, String) {
    (
        format!("{HEAD_PREFIX}{lang}.w"),
        format!("{HEAD_PREFIX}{lang}.b"),
    )
}

pub(crate) fn check_language_id(lang: &str) -> Result<()> {
    if lang.is_empty()
        || lang.contains('.')
        || lang.contains('/')
        || lang.chars().any(char::is_whitespace)
    {
        return Err(Error::Validation(format!(
            "language id `{lang}` must be non-empty without `.`, `/` or whitespace"
        )));
    }
    Ok(())
}

fn encode_with(
    config: &EncoderConfig,
    encoder: &NamedParams,
    x: &FeatureSequence,
) -> Result<(Matrix, EncoderCache)> {
    if x.cols() != config.feature_dim {
        return Err(Error::dim(format!(
            "features have {} columns, encoder expects {}",
            x.cols(),
            config.feature_dim
        )));
    }
    let mut h = x.clone();
    let mut caches = Vec::with_capacity(config.layers.len());
    for l in &config.layers {
        let (out, cache) = forward_layer(l, encoder, &h)?;
        caches.push(cache);
        h = out;
    }
    Ok((h, EncoderCache { layers: caches }))
}

fn head_logits(
    lang: &str,
    head: &NamedParams,
    hidden: &Matrix,
    emissions: usize,
) -> Result<Matrix> {
    let (wn, bn) = head_names(lang);
    let w = head.expect(&wn, hidden.cols(), emissions)?;
    let b = head.expect(&bn, 1, emissions)?;
    let mut logits = hidden.matmul(w)?;
    for r in 0..logits.rows() {
        for (v, bv) in logits.row_mut(r).iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(logits)
}

/// Loss and gradients of one utterance for explicit encoder / head
/// parameters. The head must hold exactly `head.<lang>.{w,b}`.
pub fn utterance_loss_and_grads_with(
    config: &EncoderConfig,
    encoder: &NamedParams,
    lang: &str,
    head: &NamedParams,
    emissions: usize,
    x: &FeatureSequence,
    target: &LabelSequence,
) -> Result<LossGrads> {
    let frames = config.output_frames(x.rows());
    if frames < target.min_frames() || frames == 0 {
        return Err(Error::Infeasible {
            frames,
            labels: target.len(),
            repeats: target.adjacent_repeats(),
            context: None,
        });
    }
    let (hidden, cache) = encode_with(config, encoder, x)?;
    let logits = head_logits(lang, head, &hidden, emissions)?;
    let lattice = LogProbLattice::from_logits(&logits)?;
    let (loss, g) = ctc_loss(&lattice, target)?;

    // Through log-softmax: dz = g − softmax · Σg.
    let mut dz = g;
    for t in 0..dz.rows() {
        let s: f64 = dz.row(t).iter().sum();
        let lp = lattice.log_probs().row(t);
        for (d, l) in dz.row_mut(t).iter_mut().zip(lp) {
            *d -= l.exp() * s;
        }
    }
    let (wn, bn) = head_names(lang);
    let w = head.get(&wn).expect("checked by head_logits");
    let mut grad_head = NamedParams::new();
    grad_head.insert(wn, hidden.t_matmul(&dz)?);
    grad_head.insert(bn, dz.column_sums());

    let mut grad_h = dz.matmul_t(w)?;
    let mut grad_encoder = encoder.zeros_like();
    for (l, c) in config.layers.iter().zip(&cache.layers).rev() {
        let (gi, gp) = backward_layer(l, encoder, c, &grad_h)?;
        for (name, m) in &gp {
            *grad_encoder
                .get_mut(name)
                .ok_or_else(|| Error::dim(format!("gradient for unknown parameter `{name}`")))? =
                m.clone();
        }
        grad_h = gi;
    }
    Ok(LossGrads {
        loss,
        encoder: grad_encoder,
        head: grad_head,
    })
}

/// Summed loss and gradients over a batch. Utterances are processed in
/// parallel and reduced in batch order, so the result is bit-reproducible.
pub fn batch_loss_and_grads_with(
    config: &EncoderConfig,
    encoder: &NamedParams,
    lang: &str,
    head: &NamedParams,
    emissions: usize,
    batch: &[Utterance],
) -> Result<LossGrads> {
    let parts: Vec<Result<LossGrads>> = batch
        .par_iter()
        .map(|u| {
            utterance_loss_and_grads_with(
                config,
                encoder,
                lang,
                head,
                emissions,
                &u.features,
                &u.transcript,
            )
            .map_err(|e| e.with_context(format!("utterance `{}`", u.uid)))
        })
        .collect();
    let mut total = LossGrads {
        loss: 0.0,
        encoder: encoder.zeros_like(),
        head: head.zeros_like(),
    };
    for p in parts {
        total.accumulate(&p?)?;
    }
    Ok(total)
}

/// A shared encoder and per-language heads.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadModel {
    config: EncoderConfig,
    encoder: NamedParams,
    heads: BTreeMap<String, NamedParams>,
    alphabets: BTreeMap<String, Alphabet>,
}

impl MultiHeadModel {
    /// Freshly initialised encoder, no heads.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = config.init_params(seed);
        Ok(Self {
            config,
            encoder,
            heads: BTreeMap::new(),
            alphabets: BTreeMap::new(),
        })
    }

    /// Assemble a model from stored parameters (all encoder and head arrays
    /// in one collection).
    pub fn from_params(
        config: EncoderConfig,
        alphabets: BTreeMap<String, Alphabet>,
        params: &NamedParams,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = params.with_prefix(ENCODER_PREFIX);
        let expected = config.init_params(0);
        expected.check_compatible(&encoder)?;
        let mut heads = BTreeMap::new();
        for (lang, alphabet) in &alphabets {
            check_language_id(lang)?;
            let head = params.with_prefix(&format!("{HEAD_PREFIX}{lang}."));
            let (wn, bn) = head_names(lang);
            head.expect(&wn, config.hidden_dim, alphabet.emission_size())?;
            head.expect(&bn, 1, alphabet.emission_size())?;
            if head.len() != 2 {
                return Err(Error::dim(format!(
                    "unexpected parameters under head `{lang}`"
                )));
            }
            heads.insert(lang.clone(), head);
        }
        let model = Self {
            config,
            encoder,
            heads,
            alphabets,
        };
        if model.all_params().len() != params.len() {
            return Err(Error::dim(
                "parameters without an owning encoder layer or head",
            ));
        }
        Ok(model)
    }

    /// Add a freshly initialised head for `lang`, seeded from `(seed, lang)`.
    pub fn add_language(&mut self, lang: &str, alphabet: Alphabet, seed: u64) -> Result<()> {
        check_language_id(lang)?;
        if self.heads.contains_key(lang) {
            return Err(Error::Validation(format!(
                "language `{lang}` already has a head"
            )));
        }
        let (wn, bn) = head_names(lang);
        let spec = LayerSpec::affine(
            &format!("{HEAD_PREFIX}{lang}"),
            self.config.hidden_dim,
            alphabet.emission_size(),
        );
        let mut rng = rng_for(seed, &format!("head/{lang}"));
        let p = spec.init_params(&mut rng);
        debug_assert!(p.contains(&wn) && p.contains(&bn));
        self.heads.insert(lang.to_string(), p);
        self.alphabets.insert(lang.to_string(), alphabet);
        Ok(())
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn encoder(&self) -> &NamedParams {
        &self.encoder
    }

    pub fn head(&self, lang: &str) -> Result<&NamedParams> {
        self.heads
            .get(lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn alphabet(&self, lang: &str) -> Result<&Alphabet> {
        self.alphabets
            .get(lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn alphabets(&self) -> &BTreeMap<String, Alphabet> {
        &self.alphabets
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.heads.keys().map(String::as_str)
    }

    pub fn has_language(&self, lang: &str) -> bool {
        self.heads.contains_key(lang)
    }

    /// Replace the encoder parameters; names and shapes must match.
    pub fn set_encoder(&mut self, encoder: NamedParams) -> Result<()> {
        self.encoder.check_compatible(&encoder)?;
        self.encoder = encoder;
        Ok(())
    }

    /// Replace one head's parameters; names and shapes must match.
    pub fn set_head(&mut self, lang: &str, head: NamedParams) -> Result<()> {
        let cur = self
            .heads
            .get_mut(lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))?;
        cur.check_compatible(&head)?;
        *cur = head;
        Ok(())
    }

    /// Drop every head and alphabet.
    pub fn without_heads(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            heads: BTreeMap::new(),
            alphabets: BTreeMap::new(),
        }
    }

    /// Encoder and every head in one collection.
    pub fn all_params(&self) -> NamedParams {
        let mut out = self.encoder.clone();
        for h in self.heads.values() {
            out.overwrite_from(h);
        }
        out
    }

    pub fn encode(&self, x: &FeatureSequence) -> Result<(Matrix, EncoderCache)> {
        encode_with(&self.config, &self.encoder, x)
    }

    pub fn head_forward(&self, lang: &str, hidden: &Matrix) -> Result<LogProbLattice> {
        let head = self.head(lang)?;
        let emissions = self.alphabet(lang)?.emission_size();
        LogProbLattice::from_logits(&head_logits(lang, head, hidden, emissions)?)
    }

    /// Encoder followed by the head of `lang`.
    pub fn lattice(&self, lang: &str, x: &FeatureSequence) -> Result<LogProbLattice> {
        let (h, _) = self.encode(x)?;
        self.head_forward(lang, &h)
    }

    pub fn utterance_loss_and_grads(
        &self,
        lang: &str,
        x: &FeatureSequence,
        target: &LabelSequence,
    ) -> Result<LossGrads> {
        let alphabet = self.alphabet(lang)?;
        alphabet.check_labels(target)?;
        utterance_loss_and_grads_with(
            &self.config,
            &self.encoder,
            lang,
            self.head(lang)?,
            alphabet.emission_size(),
            x,
            target,
        )
    }

    /// Summed over the batch.
    pub fn batch_loss_and_grads(&self, lang: &str, batch: &[Utterance]) -> Result<LossGrads> {
        let alphabet = self.alphabet(lang)?;
        batch_loss_and_grads_with(
            &self.config,
            &self.encoder,
            lang,
            self.head(lang)?,
            alphabet.emission_size(),
            batch,
        )
    }

    /// Summed loss only.
    pub fn batch_loss(&self, lang: &str, batch: &[Utterance]) -> Result<f64> {
        let parts: Vec<Result<f64>> = batch
            .par_iter()
            .map(|u| {
                let lat = self.lattice(lang, &u.features)?;
                Ok(ctc_loss(&lat, &u.transcript)
                    .map_err(|e| e.with_context(format!("utterance `{}`", u.uid)))?
                    .0)
            })
            .collect();
        parts.into_iter().sum()
    }
}
