// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod decoding;
pub mod embedding;
pub mod error;
pub mod objectives;
pub mod params;
pub mod rnnlm;
pub mod seq2seq;
pub mod train;

pub use error::{Error, Result};
