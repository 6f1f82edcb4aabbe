//! Central finite differences, the reference every analytic gradient in the
//! crate is checked against.

use super::NamedParams;
use crate::{Error, Result};

/// Magnitude below which gradient entries are compared absolutely rather
/// than relatively. Central differences at step 1e-5 carry roughly 1e-10
/// absolute round-off, so pure relative error on near-zero entries measures
/// noise, not correctness.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Estimate `∂loss/∂params` entrywise by `(f(p+e) − f(p−e)) / (2·step)`.
pub fn finite_diff_grad<F>(loss_fn: F, params: &NamedParams, step: f64) -> Result<NamedParams>
where
    F: Fn(&NamedParams) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Numeric(format!(
            "finite-difference step {step} must be positive"
        )));
    }
    let mut probe = params.clone();
    let mut grad = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let n = params.get(name).expect("present").len();
        for i in 0..n {
            let orig = params.get(name).expect("present").data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                probe.get_mut(name).expect("present").data_mut()[i] = v;
                let f = loss_fn(&probe)?;
                if !f.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss is {f} when `{name}`[{i}] = {v}"
                    )));
                }
                Ok(f)
            };
            let plus = eval(orig + step)?;
            let minus = eval(orig - step)?;
            probe.get_mut(name).expect("present").data_mut()[i] = orig;
            grad.get_mut(name).expect("present").data_mut()[i] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(grad)
}

/// Entrywise relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst entrywise mismatch between two gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub max_rel_err: f64,
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare an analytic gradient against a numeric one, entry by entry.
pub fn compare_grads(analytic: &NamedParams, numeric: &NamedParams) -> Result<GradMismatch> {
    analytic.check_compatible(numeric)?;
    let mut worst = GradMismatch {
        max_rel_err: 0.0,
        name: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for ((name, a), (_, n)) in analytic.iter().zip(numeric.iter()) {
        for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let e = rel_err(x, y, REL_ERR_FLOOR);
            if e > worst.max_rel_err || e.is_nan() {
                worst = GradMismatch {
                    max_rel_err: e,
                    name: name.clone(),
                    index: i,
                    analytic: x,
                    numeric: y,
                };
            }
        }
    }
    Ok(worst)
}
