//! Connectionist temporal classification.
//!
//! Emission index 0 is the blank; emission `i > 0` is `alphabet.symbols[i - 1]`.
//! Label sequences hold indices into `symbols` (no blank), alignment paths
//! hold emission indices.

mod decode;
mod loss;
mod metrics;

pub use decode::{beam_decode, greedy_decode, DEFAULT_BEAM};
pub use loss::{ctc_brute_force, ctc_loss, BRUTE_FORCE_LIMIT};
pub use metrics::{cer, edit_distance};

use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::{Error, Result};

pub const BLANK: usize = 0;

/// Tolerance on `|logsumexp(row)|` for a lattice row to count as normalized.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Ordered output symbols of one language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<char>", into = "Vec<char>")]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::Validation(format!(
                    "duplicate symbol {c:?} in alphabet"
                )));
            }
        }
        Ok(Self { symbols })
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Number of non-blank symbols.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Symbols plus blank.
    pub fn emission_size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn encode(&self, text: &str) -> Result<LabelSequence> {
        text.chars()
            .map(|c| {
                self.symbols.iter().position(|&s| s == c).ok_or_else(|| {
                    Error::Validation(format!("symbol {c:?} is not in the alphabet"))
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(LabelSequence)
    }

    pub fn decode(&self, labels: &LabelSequence) -> String {
        labels.0.iter().map(|&i| self.symbols[i]).collect()
    }

    pub fn check_labels(&self, labels: &LabelSequence) -> Result<()> {
        match labels.0.iter().find(|&&i| i >= self.len()) {
            Some(i) => Err(Error::Validation(format!(
                "label index {i} outside alphabet of {} symbols",
                self.len()
            ))),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<char>> for Alphabet {
    type Error = Error;
    fn try_from(symbols: Vec<char>) -> Result<Self> {
        Alphabet::new(symbols)
    }
}

impl From<Alphabet> for Vec<char> {
    fn from(a: Alphabet) -> Self {
        a.symbols
    }
}

/// Target label indices (no blanks).
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of adjacent equal pairs; each needs a separating blank frame.
    pub fn adjacent_repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Minimum number of frames able to emit this sequence.
    pub fn min_frames(&self) -> usize {
        self.len() + self.adjacent_repeats()
    }
}

/// Frame-level emission indices, blank included.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct AlignmentPath(pub Vec<usize>);

/// Merge adjacent repeats, then drop blanks.
pub fn collapse(path: &AlignmentPath) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &e in &path.0 {
        if Some(e) != prev && e != BLANK {
            out.push(e - 1);
        }
        prev = Some(e);
    }
    LabelSequence(out)
}

/// Per-frame log-probabilities over `alphabet.len() + 1` emissions.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbLattice {
    log_probs: Matrix,
}

impl LogProbLattice {
    /// Wrap a matrix whose rows are already log-distributions.
    pub fn new(log_probs: Matrix) -> Result<Self> {
        if log_probs.cols() < 1 {
            return Err(Error::Validation(
                "lattice needs at least the blank column".into(),
            ));
        }
        for (t, row) in log_probs.iter_rows().enumerate() {
            let z = logsumexp(row);
            if z.is_nan() || z.abs() > NORMALIZATION_TOL {
                return Err(Error::Validation(format!(
                    "lattice row {t} is not normalized (logsumexp = {z:e})"
                )));
            }
        }
        Ok(Self { log_probs })
    }

    /// Row-wise log-softmax of unnormalized scores.
    pub fn from_logits(logits: &Matrix) -> Result<Self> {
        if !logits.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(Self {
            log_probs: log_softmax_rows(logits),
        })
    }

    /// Lattice from per-frame probabilities (each row summing to one).
    pub fn from_probs(probs: &[Vec<f64>]) -> Result<Self> {
        let m = Matrix::from_rows(probs)?;
        Self::new(m.map(f64::ln))
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn emission_size(&self) -> usize {
        self.log_probs.cols()
    }

    pub fn log_probs(&self) -> &Matrix {
        &self.log_probs
    }

    pub fn into_matrix(self) -> Matrix {
        self.log_probs
    }

    /// Per-frame argmax, ties to the lowest index.
    pub fn best_path(&self) -> AlignmentPath {
        AlignmentPath(
            self.log_probs
                .iter_rows()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                            if v > bv {
                                (i, v)
                            } else {
                                (bi, bv)
                            }
                        })
                        .0
                })
                .collect(),
        )
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[inline]
pub(crate) fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let z = logsumexp(row);
        for v in row.iter_mut() {
            *v -= z;
        }
    }
    out
}
