//! Languages as tasks: utterances, full / limited / test splits, the
//! synthetic family generator and the JSON-lines corpus format.

mod corpus;
mod synthetic;

pub use corpus::{load_corpus, parse_corpus, write_corpus, CorpusHeader, CorpusSplits};
pub use synthetic::{generate_family, SyntheticFamilyConfig};

use rand::seq::index::sample;

use crate::ctc::{Alphabet, LabelSequence};
use crate::diffcore::Matrix;
use crate::rng::rng_for;
use crate::{Error, Result};

/// Fraction of the full split kept in the limited split.
pub const LIMITED_FRACTION: f64 = 0.10;

/// A transcribed feature sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub uid: String,
    pub features: Matrix,
    pub transcript: LabelSequence,
}

/// One language: its alphabet and data splits.
///
/// `limited` is a subset of `full`; `test` is disjoint from both.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageTask {
    pub id: String,
    pub alphabet: Alphabet,
    pub feature_dim: usize,
    pub full: Vec<Utterance>,
    pub limited: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Which slice of a task to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Full,
    Limited,
    Test,
}

impl LanguageTask {
    pub fn split(&self, which: Split) -> &[Utterance] {
        match which {
            Split::Full => &self.full,
            Split::Limited => &self.limited,
            Split::Test => &self.test,
        }
    }

    /// Check split relations, alphabet closure and feature shapes.
    pub fn validate(&self) -> Result<()> {
        crate::model::check_language_id(&self.id)?;
        if self.full.is_empty() && self.test.is_empty() {
            return Err(Error::Validation(format!(
                "language `{}` has no utterances",
                self.id
            )));
        }
        let full_ids: std::collections::HashSet<&str> =
            self.full.iter().map(|u| u.uid.as_str()).collect();
        if full_ids.len() != self.full.len() {
            return Err(Error::Validation(format!(
                "duplicate uid in `{}` full split",
                self.id
            )));
        }
        for u in &self.limited {
            if !self.full.contains(u) {
                return Err(Error::Validation(format!(
                    "limited utterance `{}` is not in the full split",
                    u.uid
                )));
            }
        }
        for u in &self.test {
            if full_ids.contains(u.uid.as_str()) {
                return Err(Error::Validation(format!(
                    "test utterance `{}` also appears in the full split",
                    u.uid
                )));
            }
        }
        for u in self.full.iter().chain(&self.test) {
            if u.features.cols() != self.feature_dim {
                return Err(Error::Validation(format!(
                    "utterance `{}` has {} feature columns, expected {}",
                    u.uid,
                    u.features.cols(),
                    self.feature_dim
                )));
            }
            if !u.features.is_finite() {
                return Err(Error::Validation(format!(
                    "utterance `{}` has non-finite features",
                    u.uid
                )));
            }
            self.alphabet
                .check_labels(&u.transcript)
                .map_err(|e| e.with_context(format!("utterance `{}`", u.uid)))?;
        }
        Ok(())
    }
}

/// Replace `task.limited` with a seeded uniform sample of
/// `round(fraction · |full|)` full-split utterances, kept in full-split order.
pub fn split_limited(task: &LanguageTask, fraction: f64, seed: u64) -> Result<LanguageTask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!(
            "limited fraction {fraction} must be in (0, 1]"
        )));
    }
    let n = (fraction * task.full.len() as f64).round() as usize;
    if n == 0 {
        return Err(Error::Validation(format!(
            "limited split of `{}` would be empty ({} full utterances, fraction {fraction})",
            task.id,
            task.full.len()
        )));
    }
    let mut rng = rng_for(seed, &format!("limited/{}", task.id));
    let mut picked = sample(&mut rng, task.full.len(), n).into_vec();
    picked.sort_unstable();
    let mut out = task.clone();
    out.limited = picked.into_iter().map(|i| task.full[i].clone()).collect();
    Ok(out)
}
