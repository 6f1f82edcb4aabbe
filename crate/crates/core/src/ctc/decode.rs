use std::cmp::Ordering;
use std::collections::HashMap;

use super::{collapse, logaddexp, LabelSequence, LogProbLattice, BLANK};

/// Beam width used when none is given.
pub const DEFAULT_BEAM: usize = 20;

/// Best-path decoding: per-frame argmax (lowest index on ties), then collapse.
pub fn greedy_decode(lattice: &LogProbLattice) -> LabelSequence {
    collapse(&lattice.best_path())
}

/// A beam entry: a label prefix together with whether the last frame
/// emitted a blank. The two endings of one prefix are separate entries.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Hyp {
    prefix: Vec<usize>,
    ends_in_blank: bool,
}

impl Hyp {
    /// Prefix first, then blank-ending before symbol-ending.
    fn order(&self, other: &Self) -> Ordering {
        self.prefix
            .cmp(&other.prefix)
            .then_with(|| other.ends_in_blank.cmp(&self.ends_in_blank))
    }
}

fn rank(a: &(Hyp, f64), b: &(Hyp, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.order(&b.0))
}

/// CTC prefix beam search.
///
/// Each beam entry is a `(prefix, ending)` pair carrying the summed
/// probability of every path that reaches it, so merging of alignments into
/// prefixes is exact. With a beam wide enough to hold every reachable entry
/// the result is the exact most probable label sequence; with `beam = 1` the
/// single surviving entry follows the per-frame argmax, i.e. greedy decoding.
/// Ties are broken lexicographically on label indices.
pub fn beam_decode(lattice: &LogProbLattice, beam: usize) -> LabelSequence {
    let beam = beam.max(1);
    let mut hyps: Vec<(Hyp, f64)> = vec![(
        Hyp {
            prefix: Vec::new(),
            ends_in_blank: true,
        },
        0.0,
    )];
    for row in lattice.log_probs().iter_rows() {
        let mut next: HashMap<Hyp, f64> = HashMap::with_capacity(hyps.len() * row.len());
        let mut push = |h: Hyp, v: f64| {
            next.entry(h)
                .and_modify(|acc| *acc = logaddexp(*acc, v))
                .or_insert(v);
        };
        // Sources are visited in beam order, so accumulation order is fixed.
        for (hyp, score) in &hyps {
            let last = if hyp.ends_in_blank {
                None
            } else {
                hyp.prefix.last().map(|&l| l + 1)
            };
            for (e, &lp) in row.iter().enumerate() {
                let v = score + lp;
                if e == BLANK {
                    push(
                        Hyp {
                            prefix: hyp.prefix.clone(),
                            ends_in_blank: true,
                        },
                        v,
                    );
                } else if Some(e) == last {
                    push(
                        Hyp {
                            prefix: hyp.prefix.clone(),
                            ends_in_blank: false,
                        },
                        v,
                    );
                } else {
                    let mut prefix = hyp.prefix.clone();
                    prefix.push(e - 1);
                    push(
                        Hyp {
                            prefix,
                            ends_in_blank: false,
                        },
                        v,
                    );
                }
            }
        }
        let mut ranked: Vec<(Hyp, f64)> = next.into_iter().collect();
        ranked.sort_by(rank);
        ranked.truncate(beam);
        hyps = ranked;
    }

    // Merge the two endings of each surviving prefix.
    let mut merged: Vec<(Vec<usize>, f64)> = Vec::new();
    for (hyp, score) in hyps {
        match merged.iter_mut().find(|(p, _)| *p == hyp.prefix) {
            Some((_, acc)) => *acc = logaddexp(*acc, score),
            None => merged.push((hyp.prefix, score)),
        }
    }
    merged
        .into_iter()
        .min_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)))
        .map(|(p, _)| LabelSequence(p))
        .unwrap_or_default()
}
