//! Mechanistic-interpretability engine for GPT-2 style decoder-only
//! transformers: per-head logit attribution, post-softmax attention
//! interventions, OV-circuit SVD readout, counterfactual-prompt dataset
//! tooling, and a small trainer for desk-scale toy models.

pub mod attribution;
pub mod dataset;
pub mod error;
pub mod intervention;
pub mod model;
pub mod parity;
pub mod runner;
pub mod report;
pub mod svd_lens;
pub mod tensor;
pub mod tokenizer;
pub mod toytrain;

pub use error::{MieError, Result};
