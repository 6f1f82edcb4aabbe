use super::{collapse, logaddexp, AlignmentPath, LabelSequence, LogProbLattice, BLANK};
use crate::diffcore::Matrix;
use crate::{Error, Result};

/// Largest path count `ctc_brute_force` will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 10_000_000;

fn check_target(lattice: &LogProbLattice, target: &LabelSequence) -> Result<()> {
    let n_symbols = lattice.emission_size() - 1;
    if let Some(&bad) = target.0.iter().find(|&&l| l >= n_symbols) {
        return Err(Error::Validation(format!(
            "target label {bad} outside lattice with {n_symbols} symbols"
        )));
    }
    Ok(())
}

/// `−log P(target | lattice)` and its gradient with respect to every
/// lattice entry.
///
/// Runs the forward–backward recursion in log space over the target
/// interleaved with blanks (`2L + 1` states). `beta[t][s]` excludes the
/// emission at frame `t`, so `alpha[t][s] + beta[t][s]` is the log-mass of
/// all paths occupying state `s` at frame `t` and the gradient entry for
/// emission `k` is minus the posterior occupancy of states labelled `k`.
pub fn ctc_loss(lattice: &LogProbLattice, target: &LabelSequence) -> Result<(f64, Matrix)> {
    check_target(lattice, target)?;
    let frames = lattice.frames();
    if frames == 0 {
        return Err(Error::Validation("lattice has no frames".into()));
    }
    if frames < target.min_frames() {
        return Err(Error::Infeasible {
            frames,
            labels: target.len(),
            repeats: target.adjacent_repeats(),
            context: None,
        });
    }
    let lp = lattice.log_probs();
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.0.iter().flat_map(|&l| [l + 1, BLANK]))
        .collect();
    let states = ext.len();
    // Skip transitions s-2 → s are allowed into non-blank states whose label
    // differs from the one two positions back.
    let can_skip: Vec<bool> = (0..states)
        .map(|s| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2])
        .collect();

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; frames * states];
    alpha[0] = lp.get(0, ext[0]);
    if states > 1 {
        alpha[1] = lp.get(0, ext[1]);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * states);
        let prev = &prev[(t - 1) * states..];
        let row = lp.row(t);
        for s in 0..states {
            let mut a = prev[s];
            if s >= 1 {
                a = logaddexp(a, prev[s - 1]);
            }
            if can_skip[s] {
                a = logaddexp(a, prev[s - 2]);
            }
            cur[s] = a + row[ext[s]];
        }
    }

    let mut beta = vec![neg; frames * states];
    let last = (frames - 1) * states;
    beta[last + states - 1] = 0.0;
    if states > 1 {
        beta[last + states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * states);
        let cur = &mut cur[t * states..];
        let next = &next[..states];
        let row = lp.row(t + 1);
        for s in 0..states {
            let mut b = next[s] + row[ext[s]];
            if s + 1 < states {
                b = logaddexp(b, next[s + 1] + row[ext[s + 1]]);
            }
            if s + 2 < states && can_skip[s + 2] {
                b = logaddexp(b, next[s + 2] + row[ext[s + 2]]);
            }
            cur[s] = b;
        }
    }

    let log_p = if states > 1 {
        logaddexp(alpha[last + states - 1], alpha[last + states - 2])
    } else {
        alpha[last]
    };
    if !log_p.is_finite() {
        return Err(Error::Numeric(format!("log P(target) = {log_p}")));
    }

    let mut grad = Matrix::zeros(frames, lattice.emission_size());
    for t in 0..frames {
        let g = grad.row_mut(t);
        for s in 0..states {
            let occ = alpha[t * states + s] + beta[t * states + s] - log_p;
            if occ > neg {
                g[ext[s]] -= occ.exp();
            }
        }
    }
    // −log P is non-negative; round-off can push it to −1e-16.
    Ok(((-log_p).max(0.0), grad))
}

/// `−log` of the summed probability of every alignment path that collapses
/// to `target`, by literal enumeration. Test oracle only.
pub fn ctc_brute_force(lattice: &LogProbLattice, target: &LabelSequence) -> Result<f64> {
    check_target(lattice, target)?;
    let frames = lattice.frames();
    let emissions = lattice.emission_size();
    let count = (emissions as u64)
        .checked_pow(frames as u32)
        .filter(|&c| c <= BRUTE_FORCE_LIMIT)
        .ok_or_else(|| {
            Error::Guard(format!(
                "{emissions}^{frames} paths exceeds the brute-force limit of {BRUTE_FORCE_LIMIT}"
            ))
        })?;
    let lp = lattice.log_probs();
    let mut path = AlignmentPath(vec![0; frames]);
    let mut total = 0.0;
    for mut code in 0..count {
        for e in path.0.iter_mut() {
            *e = (code % emissions as u64) as usize;
            code /= emissions as u64;
        }
        if collapse(&path) == *target {
            let log_prob: f64 = path.0.iter().enumerate().map(|(t, &e)| lp.get(t, e)).sum();
            total += log_prob.exp();
        }
    }
    Ok(-total.ln())
}
