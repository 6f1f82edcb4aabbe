//! Meta-learned multilingual pretraining for CTC sequence recognizers.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: matrices, named parameter sets, layers with hand-written
//!   backward passes, SGD and a central finite-difference oracle.
//! - [`ctc`]: exact CTC loss and gradient, brute-force oracle, greedy and
//!   prefix beam decoders, edit distance and CER.
//! - [`model`]: a shared encoder with one affine + log-softmax head per language.
//! - [`metatrain`]: monolingual / multitask training, first-order MAML episodes,
//!   the exact meta-gradient oracle, pretraining loops and checkpoint selection.
//! - [`tasks`]: synthetic language families, limited splits and the corpus file format.

pub mod ctc;
pub mod diffcore;
mod error;
pub mod metatrain;
pub mod model;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
