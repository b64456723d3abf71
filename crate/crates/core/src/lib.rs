// Validation uses `!(x > 0.0)` so that NaN is rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod latent;
pub mod policy;
pub mod training;

pub use error::{Error, Result};
