use super::LabelSequence;
use crate::{Error, Result};

/// Levenshtein distance with unit insert, delete and substitute costs.
pub fn edit_distance(reference: &LabelSequence, hypothesis: &LabelSequence) -> usize {
    let (r, h) = (&reference.0, &hypothesis.0);
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    let mut cur = vec![0; h.len() + 1];
    for (i, rc) in r.iter().enumerate() {
        cur[0] = i + 1;
        for (j, hc) in h.iter().enumerate() {
            let sub = prev[j] + usize::from(rc != hc);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[h.len()]
}

/// Corpus character error rate in percent: total edits over total
/// reference length. Can exceed 100.
pub fn cer(refs: &[LabelSequence], hyps: &[LabelSequence]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Validation(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let total: usize = refs.iter().map(LabelSequence::len).sum();
    if total == 0 {
        return Err(Error::Validation(
            "reference corpus has no characters".into(),
        ));
    }
    let edits: usize = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| edit_distance(r, h))
        .sum();
    Ok(100.0 * edits as f64 / total as f64)
}
