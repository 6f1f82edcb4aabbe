use rayon::prelude::*;

use super::{EpisodeConfig, TaskBatchSample};
use crate::diffcore::{finite_diff_grad, sgd_step, NamedParams};
use crate::model::{batch_loss_and_grads_with, EncoderConfig, LossGrads, MultiHeadModel};
use crate::{Error, Result};

/// Largest encoder + head size accepted by [`exact_meta_grad_fd`].
pub const EXACT_META_GRAD_LIMIT: usize = 2000;

/// A task seen through its adaptation and evaluation objectives, as
/// functions of explicit encoder and head parameters.
pub trait AdaptationObjective: Sync {
    fn train(&self, encoder: &NamedParams, head: &NamedParams) -> Result<LossGrads>;
    fn test(&self, encoder: &NamedParams, head: &NamedParams) -> Result<LossGrads>;
}

/// Mean CTC loss of one language over the train / test halves of a sample.
pub struct SampleObjective<'a> {
    pub config: &'a EncoderConfig,
    pub lang: &'a str,
    pub emissions: usize,
    pub sample: &'a TaskBatchSample,
}

impl<'a> SampleObjective<'a> {
    pub fn new(model: &'a MultiHeadModel, sample: &'a TaskBatchSample) -> Result<Self> {
        if sample.train_set.is_empty() || sample.test_set.is_empty() {
            return Err(Error::Validation(format!(
                "task `{}` needs non-empty train and test samples",
                sample.task_id
            )));
        }
        Ok(Self {
            config: model.config(),
            lang: &sample.task_id,
            emissions: model.alphabet(&sample.task_id)?.emission_size(),
            sample,
        })
    }

    fn mean(
        &self,
        encoder: &NamedParams,
        head: &NamedParams,
        set: &[crate::tasks::Utterance],
    ) -> Result<LossGrads> {
        Ok(
            batch_loss_and_grads_with(self.config, encoder, self.lang, head, self.emissions, set)?
                .scaled(1.0 / set.len() as f64),
        )
    }
}

impl AdaptationObjective for SampleObjective<'_> {
    fn train(&self, encoder: &NamedParams, head: &NamedParams) -> Result<LossGrads> {
        self.mean(encoder, head, &self.sample.train_set)
    }

    fn test(&self, encoder: &NamedParams, head: &NamedParams) -> Result<LossGrads> {
        self.mean(encoder, head, &self.sample.test_set)
    }
}

/// `steps` SGD steps on the train objective, moving encoder and head.
pub fn adapt<O: AdaptationObjective + ?Sized>(
    obj: &O,
    encoder: &NamedParams,
    head: &NamedParams,
    lr: f64,
    steps: usize,
) -> Result<(NamedParams, NamedParams)> {
    let mut enc = encoder.clone();
    let mut hd = head.clone();
    for _ in 0..steps {
        let g = obj.train(&enc, &hd)?;
        enc = sgd_step(&enc, &g.encoder, lr)?;
        hd = sgd_step(&hd, &g.head, lr)?;
    }
    Ok((enc, hd))
}

/// One task's contribution to a first-order meta-gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct FomamlTerm {
    /// Test loss at the adapted parameters.
    pub test_loss: f64,
    /// Gradient of the test loss w.r.t. the encoder, taken at the adapted
    /// parameters and used as a stand-in for the gradient w.r.t. the
    /// pre-adaptation encoder.
    pub encoder_grad: NamedParams,
    pub adapted_head: NamedParams,
}

pub fn fomaml_term<O: AdaptationObjective + ?Sized>(
    obj: &O,
    encoder: &NamedParams,
    head: &NamedParams,
    inner_lr: f64,
    inner_steps: usize,
) -> Result<FomamlTerm> {
    let (enc, hd) = adapt(obj, encoder, head, inner_lr, inner_steps)?;
    let g = obj.test(&enc, &hd)?;
    Ok(FomamlTerm {
        test_loss: g.loss,
        encoder_grad: g.encoder,
        adapted_head: hd,
    })
}

/// Central-difference gradient of `encoder ↦ test(adapt(encoder, head))`,
/// i.e. the meta-gradient including second-order terms. The head
/// initialisation is held fixed.
pub fn exact_meta_grad_fd_with<O: AdaptationObjective + ?Sized>(
    obj: &O,
    encoder: &NamedParams,
    head: &NamedParams,
    inner_lr: f64,
    inner_steps: usize,
    step: f64,
) -> Result<NamedParams> {
    let size = encoder.num_scalars() + head.num_scalars();
    if size > EXACT_META_GRAD_LIMIT {
        return Err(Error::Guard(format!(
            "exact meta-gradient over {size} parameters exceeds the limit of {EXACT_META_GRAD_LIMIT}"
        )));
    }
    finite_diff_grad(
        |enc| {
            let (e, h) = adapt(obj, enc, head, inner_lr, inner_steps)?;
            Ok(obj.test(&e, &h)?.loss)
        },
        encoder,
        step,
    )
}

/// Exact meta-gradient of one task sample for a small model.
pub fn exact_meta_grad_fd(
    model: &MultiHeadModel,
    sample: &TaskBatchSample,
    cfg: &EpisodeConfig,
) -> Result<NamedParams> {
    let obj = SampleObjective::new(model, sample)?;
    exact_meta_grad_fd_with(
        &obj,
        model.encoder(),
        model.head(&sample.task_id)?,
        cfg.inner_lr,
        cfg.inner_steps,
        1e-5,
    )
}

/// Outcome of one meta-learning episode.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaEpisode {
    /// Sum over tasks of the first-order encoder gradients.
    pub meta_grad: NamedParams,
    /// Sum over tasks of the adapted test losses.
    pub meta_loss: f64,
    /// Adapted test loss per task, in sample order.
    pub task_losses: Vec<(String, f64)>,
    /// Head of each task after the inner loop, in sample order.
    pub adapted_heads: Vec<(String, NamedParams)>,
}

/// Runs the inner loop for every sample and accumulates the first-order
/// meta-gradient. Tasks run in parallel and are reduced in sample order.
pub fn meta_episode(
    model: &MultiHeadModel,
    samples: &[TaskBatchSample],
    cfg: &EpisodeConfig,
) -> Result<MetaEpisode> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Validation("episode has no tasks".into()));
    }
    let terms: Vec<Result<FomamlTerm>> = samples
        .par_iter()
        .map(|s| {
            let obj = SampleObjective::new(model, s)?;
            fomaml_term(
                &obj,
                model.encoder(),
                model.head(&s.task_id)?,
                cfg.inner_lr,
                cfg.inner_steps,
            )
            .map_err(|e| e.with_context(format!("task `{}`", s.task_id)))
        })
        .collect();

    let mut meta_grad = model.encoder().zeros_like();
    let mut meta_loss = 0.0;
    let mut task_losses = Vec::with_capacity(samples.len());
    let mut adapted_heads = Vec::with_capacity(samples.len());
    for (s, term) in samples.iter().zip(terms) {
        let term = term?;
        meta_grad.axpy(1.0, &term.encoder_grad)?;
        meta_loss += term.test_loss;
        task_losses.push((s.task_id.clone(), term.test_loss));
        adapted_heads.push((s.task_id.clone(), term.adapted_head));
    }
    if !meta_loss.is_finite() || !meta_grad.is_finite() {
        return Err(Error::Numeric(
            "non-finite meta-loss or meta-gradient".into(),
        ));
    }
    Ok(MetaEpisode {
        meta_grad,
        meta_loss,
        task_losses,
        adapted_heads,
    })
}

/// Encoder step along the meta-gradient. Heads of the episode's tasks are
/// replaced by their adapted versions (the last one wins if a task was
/// sampled twice); other heads are left untouched.
pub fn meta_update(
    model: &MultiHeadModel,
    episode: &MetaEpisode,
    cfg: &EpisodeConfig,
) -> Result<MultiHeadModel> {
    let mut next = model.clone();
    next.set_encoder(sgd_step(model.encoder(), &episode.meta_grad, cfg.meta_lr)?)?;
    for (lang, head) in &episode.adapted_heads {
        next.set_head(lang, head.clone())?;
    }
    Ok(next)
}
