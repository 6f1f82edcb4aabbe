use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{split_limited, LanguageTask, Utterance, LIMITED_FRACTION};
use crate::ctc::{Alphabet, LabelSequence};
use crate::diffcore::Matrix;
use crate::rng::rng_for;
use crate::{Error, Result};

/// Parameters of a synthetic family of related languages.
///
/// Every language draws its per-character prototypes as a language-specific
/// linear mixture of one shared pool of direction vectors: each character
/// leans on its own pool vector (assigned by a per-language random
/// injection) plus Gaussian mixing weights over the whole pool. Utterances
/// emit each character for a random number of frames as its prototype plus
/// isotropic Gaussian noise. Transcripts never repeat a character twice in a
/// row, so a frame-level classifier followed by collapse can recover them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticFamilyConfig {
    pub n_languages: usize,
    /// The first `n_source` languages are named `src0…`, the rest `tgt0…`.
    pub n_source: usize,
    pub alphabet_sizes: Vec<usize>,
    pub feature_dim: usize,
    pub shared_pool_size: usize,
    /// Standard deviation of the dense mixing weights over the pool.
    pub mixing_sigma: f64,
    /// Inclusive frames-per-character range.
    pub duration_range: [usize; 2],
    /// Inclusive characters-per-utterance range.
    pub length_range: [usize; 2],
    pub noise_sigma: f64,
    /// Size of each language's full split.
    pub utterances_per_language: usize,
    pub test_utterances: usize,
    pub limited_fraction: f64,
    /// Encoder subsampling the data must stay CTC-feasible under.
    pub subsample_stride: usize,
    pub seed: u64,
}

impl Default for SyntheticFamilyConfig {
    fn default() -> Self {
        Self {
            n_languages: 10,
            n_source: 6,
            alphabet_sizes: vec![8, 10, 12, 9, 11, 8, 10, 9, 11, 12],
            feature_dim: 16,
            shared_pool_size: 12,
            mixing_sigma: 0.3,
            duration_range: [2, 4],
            length_range: [3, 6],
            noise_sigma: 1.0,
            utterances_per_language: 500,
            test_utterances: 100,
            limited_fraction: LIMITED_FRACTION,
            subsample_stride: 2,
            seed: 0,
        }
    }
}

impl SyntheticFamilyConfig {
    pub fn language_id(&self, index: usize) -> String {
        if index < self.n_source {
            format!("src{index}")
        } else {
            format!("tgt{}", index - self.n_source)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_languages == 0 {
            return Err(Error::config("n_languages", "must be at least 1"));
        }
        if self.n_source > self.n_languages {
            return Err(Error::config("n_source", "exceeds n_languages"));
        }
        if self.alphabet_sizes.len() != self.n_languages {
            return Err(Error::config(
                "alphabet_sizes",
                format!(
                    "has {} entries for {} languages",
                    self.alphabet_sizes.len(),
                    self.n_languages
                ),
            ));
        }
        if let Some(&a) = self
            .alphabet_sizes
            .iter()
            .find(|&&a| !(2..=26).contains(&a))
        {
            return Err(Error::config(
                "alphabet_sizes",
                format!("size {a} is outside 2..=26"),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim", "must be positive"));
        }
        let max_alpha = self.alphabet_sizes.iter().copied().max().unwrap_or(0);
        if self.shared_pool_size < max_alpha {
            return Err(Error::config(
                "shared_pool_size",
                format!(
                    "{} is smaller than the largest alphabet ({max_alpha})",
                    self.shared_pool_size
                ),
            ));
        }
        for (field, [lo, hi]) in [
            ("duration_range", self.duration_range),
            ("length_range", self.length_range),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::config(
                    field,
                    format!("[{lo}, {hi}] must satisfy 1 <= min <= max"),
                ));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(
                "noise_sigma",
                "must be finite and non-negative",
            ));
        }
        if !(self.mixing_sigma >= 0.0 && self.mixing_sigma.is_finite()) {
            return Err(Error::config(
                "mixing_sigma",
                "must be finite and non-negative",
            ));
        }
        if self.utterances_per_language == 0 {
            return Err(Error::config("utterances_per_language", "must be positive"));
        }
        if !(self.limited_fraction > 0.0 && self.limited_fraction <= 1.0) {
            return Err(Error::config("limited_fraction", "must be in (0, 1]"));
        }
        if (self.limited_fraction * self.utterances_per_language as f64).round() < 1.0 {
            return Err(Error::config(
                "limited_fraction",
                "leaves an empty limited split",
            ));
        }
        if self.subsample_stride == 0 {
            return Err(Error::config("subsample_stride", "must be positive"));
        }
        // Without adjacent repeats a target of L labels needs L output frames.
        // The shortest utterance of each length has d_min frames per label.
        let d_min = self.duration_range[0];
        for len in self.length_range[0]..=self.length_range[1] {
            let frames = (d_min * len).div_ceil(self.subsample_stride);
            if frames < len {
                return Err(Error::config(
                    "duration_range",
                    format!(
                        "minimum duration {d_min} gives {frames} frames after stride {} for {len} labels",
                        self.subsample_stride
                    ),
                ));
            }
        }
        Ok(())
    }
}

impl SyntheticFamilyConfig {
    /// Per-language character prototypes, `alphabet_size × feature_dim`,
    /// exactly as used by [`generate_family`].
    pub fn prototypes(&self) -> Result<Vec<Matrix>> {
        self.validate()?;
        let f = self.feature_dim;
        let mut pool_rng = rng_for(self.seed, "pool");
        let pool: Vec<Vec<f64>> = (0..self.shared_pool_size)
            .map(|_| (0..f).map(|_| gaussian(&mut pool_rng)).collect())
            .collect();
        Ok((0..self.n_languages)
            .map(|li| {
                let id = self.language_id(li);
                let size = self.alphabet_sizes[li];
                let mut rng = rng_for(self.seed, &format!("prototypes/{id}"));
                let primary =
                    rand::seq::index::sample(&mut rng, self.shared_pool_size, size).into_vec();
                let mut m = Matrix::zeros(size, f);
                for (c, &p) in primary.iter().enumerate() {
                    let row = m.row_mut(c);
                    row.copy_from_slice(&pool[p]);
                    for q in &pool {
                        let w = self.mixing_sigma * gaussian(&mut rng);
                        for (a, b) in row.iter_mut().zip(q) {
                            *a += w * b;
                        }
                    }
                }
                m
            })
            .collect())
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn letters(n: usize) -> Alphabet {
    Alphabet::new((b'a'..).take(n).map(char::from).collect()).expect("distinct letters")
}

/// Generate every language of the family. Pure in `cfg`.
pub fn generate_family(cfg: &SyntheticFamilyConfig) -> Result<Vec<LanguageTask>> {
    cfg.validate()?;
    let f = cfg.feature_dim;
    let all_prototypes = cfg.prototypes()?;
    (0..cfg.n_languages)
        .map(|li| {
            let id = cfg.language_id(li);
            let size = cfg.alphabet_sizes[li];
            let prototypes = &all_prototypes[li];
            let mut utt_rng = rng_for(cfg.seed, &format!("utterances/{id}"));
            let total = cfg.utterances_per_language + cfg.test_utterances;
            let utterances: Vec<Utterance> = (0..total)
                .map(|ui| {
                    let len = utt_rng.random_range(cfg.length_range[0]..=cfg.length_range[1]);
                    let mut labels: Vec<usize> = Vec::with_capacity(len);
                    for _ in 0..len {
                        // Uniform over symbols other than the previous one.
                        let next = match labels.last() {
                            None => utt_rng.random_range(0..size),
                            Some(&prev) => {
                                let k = utt_rng.random_range(0..size - 1);
                                if k >= prev {
                                    k + 1
                                } else {
                                    k
                                }
                            }
                        };
                        labels.push(next);
                    }
                    let mut rows = Vec::new();
                    for &l in &labels {
                        let d = utt_rng.random_range(cfg.duration_range[0]..=cfg.duration_range[1]);
                        for _ in 0..d {
                            rows.push(
                                prototypes
                                    .row(l)
                                    .iter()
                                    .map(|&p| p + cfg.noise_sigma * gaussian(&mut utt_rng))
                                    .collect::<Vec<f64>>(),
                            );
                        }
                    }
                    Utterance {
                        uid: format!("{id}-{ui:05}"),
                        features: Matrix::from_rows(&rows).expect("uniform rows"),
                        transcript: LabelSequence(labels),
                    }
                })
                .collect();
            let mut full = utterances;
            let test = full.split_off(cfg.utterances_per_language);
            let task = LanguageTask {
                id,
                alphabet: letters(size),
                feature_dim: f,
                full,
                limited: Vec::new(),
                test,
            };
            split_limited(&task, cfg.limited_fraction, cfg.seed)
        })
        .collect()
}
