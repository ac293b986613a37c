//! Short-horizon variance-exploding diffusion sampling with learned
//! initializations, plus the diagnostics and experiment harness around it.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod denoiser;
pub mod error;
pub mod flow;
pub mod harness;
pub mod ht_prior;
pub mod kl_diag;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod score;
pub mod targets;

pub use error::{Error, Result};
