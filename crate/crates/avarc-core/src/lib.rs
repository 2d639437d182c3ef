//! Generative image classification with a multi-scale visual autoregressive
//! model.
//!
//! The pipeline: a residual multi-scale vector quantizer turns images into
//! coarse-to-fine token maps ([`tokenizer`]); a block-causal transformer
//! models class-conditional token likelihoods ([`model`]); classification is
//! Bayes-rule argmax over those likelihoods, optionally staged so cheap
//! partial-scale scores prune candidates before expensive smoothed scoring
//! ([`classifier`]). Token-level log-ratios against the unconditional model
//! give per-region explanations ([`explain`]), and independently trained
//! per-task models can be merged into one classifier without retraining
//! ([`incremental`]).

pub mod classifier;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod incremental;
pub mod io;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
