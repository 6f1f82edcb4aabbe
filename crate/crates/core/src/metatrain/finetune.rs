use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply_step, mean_loss, mean_loss_and_grads};
use crate::ctc::{beam_decode, cer, edit_distance, LabelSequence};
use crate::model::{Checkpoint, MultiHeadModel};
use crate::rng::rng_for;
use crate::tasks::{LanguageTask, Split, Utterance};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Beam width used for validation decoding.
    pub beam: usize,
    /// Seeds the fresh head and the per-epoch shuffles.
    pub seed: u64,
    /// Stop after the first epoch whose validation CER is below this.
    pub stop_below_cer: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 20,
            batch_size: 8,
            beam: crate::ctc::DEFAULT_BEAM,
            seed: 0,
            stop_below_cer: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(
                "finetune.lr",
                "must be finite and non-negative",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("finetune.batch_size", "must be at least 1"));
        }
        if self.beam == 0 {
            return Err(Error::config("finetune.beam", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's minibatches of the pre-update batch loss.
    pub train_loss: f64,
    /// Mean loss on the task's test split after the epoch.
    pub val_loss: Option<f64>,
    pub val_cer: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: MultiHeadModel,
    pub epochs: Vec<EpochRecord>,
}

impl FinetuneOutcome {
    /// Lowest validation CER over all epochs.
    pub fn best_cer(&self) -> Option<f64> {
        self.epochs
            .iter()
            .filter_map(|e| e.val_cer)
            .reduce(f64::min)
    }

    pub fn final_cer(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_cer)
    }
}

/// Minibatch SGD on one split of `task`, updating the encoder and the
/// task's head. A language the model has not seen gets a fresh seeded
/// head. After each epoch the test split, when non-empty, is scored.
pub fn finetune(
    model: &MultiHeadModel,
    task: &LanguageTask,
    split: Split,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let data = task.split(split);
    if data.is_empty() {
        return Err(Error::Validation(format!(
            "task `{}` has an empty {split:?} split",
            task.id
        )));
    }
    let mut current = model.clone();
    if current.has_language(&task.id) {
        if current.alphabet(&task.id)? != &task.alphabet {
            return Err(Error::Validation(format!(
                "model head for `{}` uses a different alphabet",
                task.id
            )));
        }
    } else {
        current.add_language(&task.id, task.alphabet.clone(), cfg.seed)?;
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut rng = rng_for(cfg.seed, &format!("finetune/{}/{epoch}", task.id));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Utterance> = chunk.iter().map(|&i| data[i].clone()).collect();
            let g = mean_loss_and_grads(&current, &task.id, &batch)
                .map_err(|e| e.with_context(format!("epoch {epoch}")))?;
            loss_sum += g.loss;
            batches += 1;
            current = apply_step(&current, &task.id, &g, cfg.lr)?;
        }
        let train_loss = loss_sum / batches as f64;
        if !train_loss.is_finite() || !current.encoder().is_finite() {
            return Err(Error::Numeric(format!(
                "fine-tuning `{}` diverged in epoch {epoch}",
                task.id
            )));
        }
        let (val_loss, val_cer) = if task.test.is_empty() {
            (None, None)
        } else {
            let loss = mean_loss(&current, &task.id, &task.test)?;
            let eval = evaluate(&current, &task.id, &task.test, cfg.beam)?;
            (Some(loss), Some(eval.cer))
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_cer,
        });
        if let (Some(limit), Some(c)) = (cfg.stop_below_cer, val_cer) {
            if c < limit {
                break;
            }
        }
    }
    Ok(FinetuneOutcome {
        model: current,
        epochs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub uid: String,
    pub reference: String,
    pub hypothesis: String,
    pub edits: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub results: Vec<UtteranceResult>,
    /// Corpus CER in percent.
    pub cer: f64,
}

/// Beam-decodes every utterance and scores the corpus CER.
pub fn evaluate(
    model: &MultiHeadModel,
    lang: &str,
    utterances: &[Utterance],
    beam: usize,
) -> Result<Evaluation> {
    if utterances.is_empty() {
        return Err(Error::Validation("no utterances to evaluate".into()));
    }
    if beam == 0 {
        return Err(Error::Validation("beam width must be at least 1".into()));
    }
    let alphabet = model.alphabet(lang)?;
    let hyps: Vec<Result<LabelSequence>> = utterances
        .par_iter()
        .map(|u| Ok(beam_decode(&model.lattice(lang, &u.features)?, beam)))
        .collect();
    let hyps = hyps.into_iter().collect::<Result<Vec<_>>>()?;
    let refs: Vec<LabelSequence> = utterances.iter().map(|u| u.transcript.clone()).collect();
    let score = cer(&refs, &hyps)?;
    let results = utterances
        .iter()
        .zip(&hyps)
        .map(|(u, h)| UtteranceResult {
            uid: u.uid.clone(),
            reference: alphabet.decode(&u.transcript),
            hypothesis: alphabet.decode(h),
            edits: edit_distance(&u.transcript, h),
        })
        .collect();
    Ok(Evaluation {
        results,
        cer: score,
    })
}

/// Outcome of [`select_checkpoint`].
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub step: u64,
    /// Mean validation CER per checkpoint; empty when there was nothing to
    /// compare.
    pub scores: Vec<f64>,
}

/// Fine-tunes every checkpoint on each validation task's limited split and
/// picks the lowest mean best-epoch CER on the tasks' test splits. Ties go
/// to the earliest step.
pub fn select_checkpoint(
    checkpoints: &[Checkpoint],
    validation_tasks: &[LanguageTask],
    cfg: &FinetuneConfig,
) -> Result<Selection> {
    if checkpoints.is_empty() {
        return Err(Error::Validation("no checkpoints to select from".into()));
    }
    if validation_tasks.is_empty() {
        return Err(Error::Validation("no validation tasks".into()));
    }
    if checkpoints.len() == 1 {
        return Ok(Selection {
            index: 0,
            step: checkpoints[0].step,
            scores: Vec::new(),
        });
    }
    let mut scores = Vec::with_capacity(checkpoints.len());
    for ck in checkpoints {
        let mut total = 0.0;
        for task in validation_tasks {
            let out = finetune(&ck.model, task, Split::Limited, cfg)
                .map_err(|e| e.with_context(format!("checkpoint at step {}", ck.step)))?;
            total += out.best_cer().ok_or_else(|| {
                Error::Validation(format!(
                    "validation task `{}` has no test split or no epochs",
                    task.id
                ))
            })?;
        }
        scores.push(total / validation_tasks.len() as f64);
    }
    let mut best = 0;
    for i in 1..checkpoints.len() {
        let (s, b) = (scores[i], scores[best]);
        if s < b || (s == b && checkpoints[i].step < checkpoints[best].step) {
            best = i;
        }
    }
    Ok(Selection {
        index: best,
        step: checkpoints[best].step,
        scores,
    })
}
