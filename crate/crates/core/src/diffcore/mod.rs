//! Differentiable building blocks: matrices, named parameter sets, layers
//! with hand-written backward passes, SGD, and a finite-difference oracle.

mod gradcheck;
mod layers;
mod matrix;
mod params;

pub use gradcheck::{compare_grads, finite_diff_grad, rel_err, GradMismatch, REL_ERR_FLOOR};
pub use layers::{backward_layer, forward_layer, ForwardCache, LayerKind, LayerSpec};
pub use matrix::Matrix;
pub use params::NamedParams;

use crate::Result;

/// `params − lr · grads`, entrywise. Inputs are left untouched.
pub fn sgd_step(params: &NamedParams, grads: &NamedParams, lr: f64) -> Result<NamedParams> {
    let mut out = params.clone();
    out.axpy(-lr, grads)?;
    Ok(out)
}

#[cfg(test)]
mod tests;
