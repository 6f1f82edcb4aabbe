use std::fmt;
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{meta_episode, meta_update, multitask_step, EpisodeConfig, TaskBatchSample};
use crate::model::{Checkpoint, MultiHeadModel};
use crate::rng::rng_for;
use crate::tasks::{LanguageTask, Utterance};
use crate::{Error, Result};

pub const TRAIN_LOG_HEADER: &str = "step,regime,task_id,task_loss,meta_loss,elapsed_seconds";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Joint multitask SGD over all source languages.
    Multi,
    /// First-order MAML episodes.
    Meta,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Multi => "multi",
            Regime::Meta => "meta",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(Regime::Multi),
            "meta" => Ok(Regime::Meta),
            other => Err(Error::config(
                "regime",
                format!("unknown regime `{other}`, expected multi or meta"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub regime: Regime,
    pub total_steps: u64,
    /// Emit a checkpoint every this many steps; 0 keeps only the last one.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub episode: EpisodeConfig,
    /// Step size of the multitask regime.
    pub multi_lr: f64,
    /// Utterances per language per multitask step.
    pub multi_batch: usize,
    /// Fill `elapsed_seconds` with wall-clock time. Off by default so that
    /// logs are byte-reproducible.
    pub record_wall_clock: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Meta,
            total_steps: 400,
            checkpoint_every: 50,
            seed: 0,
            episode: EpisodeConfig::default(),
            multi_lr: 0.05,
            multi_batch: 8,
            record_wall_clock: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be at least 1"));
        }
        if !(self.multi_lr >= 0.0 && self.multi_lr.is_finite()) {
            return Err(Error::config("multi_lr", "must be finite and non-negative"));
        }
        if self.multi_batch == 0 {
            return Err(Error::config("multi_batch", "must be at least 1"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub regime: Regime,
    pub task_id: String,
    /// Mean batch loss (multi) or adapted test loss (meta) of this task.
    pub task_loss: f64,
    /// Total objective of the step, shared by all rows of that step.
    pub meta_loss: f64,
    pub elapsed_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.regime, r.task_id, r.task_loss, r.meta_loss, r.elapsed_seconds
            ));
        }
        out
    }

    /// `meta_loss` of each step, in step order.
    pub fn step_losses(&self) -> Vec<(u64, f64)> {
        let mut out: Vec<(u64, f64)> = Vec::new();
        for r in &self.records {
            if out.last().map(|l| l.0) != Some(r.step) {
                out.push((r.step, r.meta_loss));
            }
        }
        out
    }
}

fn distinct(rng: &mut impl rand::Rng, n: usize, k: usize, what: &str) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::config(
            what,
            format!("needs {k} items but only {n} are available"),
        ));
    }
    Ok(index::sample(rng, n, k).into_vec())
}

/// Samples the tasks and disjoint train / test utterances of episode `step`.
/// Tasks keep their order in `tasks`.
pub fn sample_episode(
    tasks: &[LanguageTask],
    cfg: &EpisodeConfig,
    seed: u64,
    step: u64,
) -> Result<Vec<TaskBatchSample>> {
    let mut rng = rng_for(seed, &format!("episode/{step}"));
    let mut picked = distinct(
        &mut rng,
        tasks.len(),
        cfg.tasks_per_episode,
        "episode.tasks_per_episode",
    )?;
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| {
            let task = &tasks[i];
            let idx = distinct(
                &mut rng,
                task.full.len(),
                cfg.n_train + cfg.n_test,
                "episode.n_train",
            )
            .map_err(|e| e.with_context(format!("task `{}`", task.id)))?;
            let (tr, te) = idx.split_at(cfg.n_train);
            Ok(TaskBatchSample {
                task_id: task.id.clone(),
                train_set: tr.iter().map(|&j| task.full[j].clone()).collect(),
                test_set: te.iter().map(|&j| task.full[j].clone()).collect(),
            })
        })
        .collect()
}

/// One batch of `batch` utterances per task for multitask step `step`.
pub fn sample_multitask_batches(
    tasks: &[LanguageTask],
    batch: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<(String, Vec<Utterance>)>> {
    let mut rng = rng_for(seed, &format!("multi/{step}"));
    tasks
        .iter()
        .map(|task| {
            let idx = distinct(&mut rng, task.full.len(), batch, "multi_batch")
                .map_err(|e| e.with_context(format!("task `{}`", task.id)))?;
            Ok((
                task.id.clone(),
                idx.iter().map(|&j| task.full[j].clone()).collect(),
            ))
        })
        .collect()
}

/// Pretrains `model` on `tasks` (full splits) with the configured regime.
/// Heads are added for tasks the model does not know yet. `on_checkpoint`
/// receives every emitted checkpoint in step order; the last step always
/// produces one.
pub fn pretrain<F>(
    model: &MultiHeadModel,
    tasks: &[LanguageTask],
    cfg: &PretrainConfig,
    mut on_checkpoint: F,
) -> Result<(MultiHeadModel, TrainLog)>
where
    F: FnMut(Checkpoint) -> Result<()>,
{
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Validation(
            "pretraining needs at least one task".into(),
        ));
    }
    let mut current = model.clone();
    for (i, t) in tasks.iter().enumerate() {
        if tasks[..i].iter().any(|o| o.id == t.id) {
            return Err(Error::Validation(format!("task `{}` listed twice", t.id)));
        }
        if !current.has_language(&t.id) {
            current.add_language(&t.id, t.alphabet.clone(), cfg.seed)?;
        }
    }

    let clock = Instant::now();
    let mut log = TrainLog::default();
    for step in 1..=cfg.total_steps {
        let rows: Vec<(String, f64)>;
        let total: f64;
        match cfg.regime {
            Regime::Multi => {
                let batches = sample_multitask_batches(tasks, cfg.multi_batch, cfg.seed, step)?;
                let (next, losses) = multitask_step(&current, &batches, cfg.multi_lr)?;
                total = losses.iter().sum();
                rows = batches.into_iter().map(|b| b.0).zip(losses).collect();
                current = next;
            }
            Regime::Meta => {
                let samples = sample_episode(tasks, &cfg.episode, cfg.seed, step)?;
                let episode = meta_episode(&current, &samples, &cfg.episode)?;
                current = meta_update(&current, &episode, &cfg.episode)?;
                total = episode.meta_loss;
                rows = episode.task_losses;
            }
        }
        if !total.is_finite() || !current.encoder().is_finite() {
            return Err(Error::Numeric(format!("training diverged at step {step}")));
        }
        let elapsed = if cfg.record_wall_clock {
            clock.elapsed().as_secs_f64()
        } else {
            0.0
        };
        log.records
            .extend(rows.into_iter().map(|(task_id, task_loss)| TrainRecord {
                step,
                regime: cfg.regime,
                task_id,
                task_loss,
                meta_loss: total,
                elapsed_seconds: elapsed,
            }));
        let due = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
        if due || step == cfg.total_steps {
            on_checkpoint(Checkpoint {
                model: current.clone(),
                step,
                seed: cfg.seed,
                regime: cfg.regime.to_string(),
            })?;
        }
    }
    Ok((current, log))
}
