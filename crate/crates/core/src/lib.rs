//! Verification of machine-unlearning requests via gradient-matched data
//! perturbations and a one-sided hypothesis test.
//!
//! The pipeline: train a classifier, pick model-unseen high-confidence
//! target samples, perturb the to-be-erased data so that honestly running
//! the agreed unlearning algorithm flips the targets' predictions, then
//! query the (allegedly) unlearned model and decide "unlearned / not
//! unlearned" with a one-sided t-test.

pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod perturb;
pub mod tape;
pub mod tensor;
pub mod unlearn;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
