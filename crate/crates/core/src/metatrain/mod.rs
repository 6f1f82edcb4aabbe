//! Training regimes: language-specific learning, joint multitask steps,
//! first-order MAML episodes, pretraining loops, fine-tuning and
//! checkpoint selection.
//!
//! Per-batch objectives are the mean CTC loss over the batch's utterances;
//! objectives over several languages or tasks are the sum of those means.

mod finetune;
mod meta;
mod pretrain;

pub use finetune::{
    evaluate, finetune, select_checkpoint, EpochRecord, Evaluation, FinetuneConfig,
    FinetuneOutcome, Selection, UtteranceResult,
};
pub use meta::{
    adapt, exact_meta_grad_fd, exact_meta_grad_fd_with, fomaml_term, meta_episode, meta_update,
    AdaptationObjective, FomamlTerm, MetaEpisode, SampleObjective, EXACT_META_GRAD_LIMIT,
};
pub use pretrain::{
    pretrain, sample_episode, sample_multitask_batches, PretrainConfig, Regime, TrainLog,
    TrainRecord, TRAIN_LOG_HEADER,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{sgd_step, NamedParams};
use crate::model::{LossGrads, MultiHeadModel};
use crate::tasks::Utterance;
use crate::{Error, Result};

/// Episode hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// SGD step size of the simulated language-specific learning.
    pub inner_lr: f64,
    /// Step size of the encoder meta-update.
    pub meta_lr: f64,
    pub tasks_per_episode: usize,
    /// Utterances per task in the adaptation (train) sample.
    pub n_train: usize,
    /// Utterances per task in the evaluation (test) sample.
    pub n_test: usize,
    pub inner_steps: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.1,
            meta_lr: 0.05,
            tasks_per_episode: 6,
            n_train: 8,
            n_test: 8,
            inner_steps: 1,
        }
    }
}

impl EpisodeConfig {
    /// `inner_lr = 0` is allowed: it turns the inner loop into the identity.
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, m: &str| Err(Error::config(format!("episode.{f}"), m));
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return field("inner_lr", "must be finite and non-negative");
        }
        if !(self.meta_lr >= 0.0 && self.meta_lr.is_finite()) {
            return field("meta_lr", "must be finite and non-negative");
        }
        if self.tasks_per_episode == 0 {
            return field("tasks_per_episode", "must be at least 1");
        }
        if self.n_train == 0 {
            return field("n_train", "must be at least 1");
        }
        if self.n_test == 0 {
            return field("n_test", "must be at least 1");
        }
        if self.inner_steps == 0 {
            return field("inner_steps", "must be at least 1");
        }
        Ok(())
    }
}

/// Adaptation and evaluation samples of one task for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatchSample {
    pub task_id: String,
    pub train_set: Vec<Utterance>,
    pub test_set: Vec<Utterance>,
}

/// Mean loss and gradients of `model` for `lang` over `batch`.
pub(crate) fn mean_loss_and_grads(
    model: &MultiHeadModel,
    lang: &str,
    batch: &[Utterance],
) -> Result<LossGrads> {
    if batch.is_empty() {
        return Err(Error::Validation(format!("empty batch for `{lang}`")));
    }
    Ok(model
        .batch_loss_and_grads(lang, batch)?
        .scaled(1.0 / batch.len() as f64))
}

pub(crate) fn apply_step(
    model: &MultiHeadModel,
    lang: &str,
    g: &LossGrads,
    lr: f64,
) -> Result<MultiHeadModel> {
    let mut next = model.clone();
    next.set_encoder(sgd_step(model.encoder(), &g.encoder, lr)?)?;
    next.set_head(lang, sgd_step(model.head(lang)?, &g.head, lr)?)?;
    Ok(next)
}

/// Mean CTC loss of `model` for `lang` over `data`.
pub fn mean_loss(model: &MultiHeadModel, lang: &str, data: &[Utterance]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Validation(format!("empty batch for `{lang}`")));
    }
    Ok(model.batch_loss(lang, data)? * (1.0 / data.len() as f64))
}

/// Result of [`learn`].
#[derive(Clone, Debug)]
pub struct LearnOutcome {
    pub model: MultiHeadModel,
    /// Mean loss on `data` before the first step and after every step.
    pub losses: Vec<f64>,
}

/// Language-specific learning: `steps` full-batch SGD steps on the mean CTC
/// loss of `data`, updating the encoder and the head of `task` only.
pub fn learn(
    model: &MultiHeadModel,
    task: &str,
    data: &[Utterance],
    lr: f64,
    steps: usize,
) -> Result<LearnOutcome> {
    model.head(task)?;
    if data.is_empty() {
        return Err(Error::Validation(format!("no data to learn `{task}` from")));
    }
    let mut current = model.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let g = mean_loss_and_grads(&current, task, data)?;
        losses.push(g.loss);
        current = apply_step(&current, task, &g, lr)?;
    }
    losses.push(mean_loss(&current, task, data)?);
    Ok(LearnOutcome {
        model: current,
        losses,
    })
}

/// Gradients of the multitask objective: the sum over batches of each
/// batch's mean loss.
#[derive(Clone, Debug, PartialEq)]
pub struct MultitaskGrads {
    pub encoder: NamedParams,
    /// Per-language head gradient, summed over that language's batches.
    pub heads: BTreeMap<String, NamedParams>,
    /// Mean loss of each batch, in batch order.
    pub losses: Vec<f64>,
}

pub fn multitask_grads(
    model: &MultiHeadModel,
    batches: &[(String, Vec<Utterance>)],
) -> Result<MultitaskGrads> {
    if batches.is_empty() {
        return Err(Error::Validation(
            "multitask step needs at least one batch".into(),
        ));
    }
    let mut encoder = model.encoder().zeros_like();
    let mut heads: BTreeMap<String, NamedParams> = BTreeMap::new();
    let mut losses = Vec::with_capacity(batches.len());
    for (lang, batch) in batches {
        let g = mean_loss_and_grads(model, lang, batch)
            .map_err(|e| e.with_context(format!("language `{lang}`")))?;
        encoder.axpy(1.0, &g.encoder)?;
        match heads.get_mut(lang) {
            Some(h) => h.axpy(1.0, &g.head)?,
            None => {
                heads.insert(lang.clone(), g.head);
            }
        }
        losses.push(g.loss);
    }
    Ok(MultitaskGrads {
        encoder,
        heads,
        losses,
    })
}

/// One SGD step on the multitask objective. The encoder and every head
/// with a batch move; other heads stay put. Returns the pre-step batch
/// losses.
pub fn multitask_step(
    model: &MultiHeadModel,
    batches: &[(String, Vec<Utterance>)],
    lr: f64,
) -> Result<(MultiHeadModel, Vec<f64>)> {
    let g = multitask_grads(model, batches)?;
    let mut next = model.clone();
    next.set_encoder(sgd_step(model.encoder(), &g.encoder, lr)?)?;
    for (lang, hg) in &g.heads {
        next.set_head(lang, sgd_step(model.head(lang)?, hg, lr)?)?;
    }
    Ok((next, g.losses))
}
