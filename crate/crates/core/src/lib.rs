//! Context-window extension laboratory for RoPE decoder transformers.
//!
//! - [`position_plan`]: skip-wise, random-subset and full-length position layouts
//! - [`rope`]: rotary embedding and Linear / NTK / YaRN frequency remapping
//! - [`coverage`]: Monte Carlo coverage of relative distances per example
//! - [`model`]: tiny transformer, gradients, AdamW and the training loop
//! - [`evaluation`]: sliding-window perplexity and passkey retrieval
//! - [`data`]: corpus formats and synthetic corpora

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod coverage;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod position_plan;
pub mod rope;
pub mod util;

pub use error::{Error, Result};
