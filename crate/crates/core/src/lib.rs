//! Latent adversarial training for small transformer language models.

// `!(x > 0.0)` is used on purpose: unlike `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod cli;
pub mod diff;
mod error;
pub mod evalkit;
pub mod lm;
pub mod objectives;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
