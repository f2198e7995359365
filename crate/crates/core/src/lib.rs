//! Factorial mixture-prior VAE: model, variational updates, training loop and tooling.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod data;
pub mod elbo;
pub mod error;
pub mod expfam;
pub mod nets;
pub mod prior;
pub mod special;
pub mod trainer;

pub use error::{FmxError, Result};
