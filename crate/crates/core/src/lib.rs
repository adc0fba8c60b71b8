//! Watermark laboratory: a performer/observer pair of LoRA adapters on a tiny
//! decoder-only transformer, trained so that the performer's samples are
//! separable from human text by the Binoculars score.
//!
//! Module map:
//! - [`numerics`]: tensors and a tape-based reverse-mode autodiff engine.
//! - [`model`]: the transformer, LoRA adapters, incremental decoder, checkpoints.
//! - [`data`]: byte tokenizer, corpus ingestion, batch sampling.
//! - [`binoculars`]: log-perplexity, cross-perplexity and the score ratio.
//! - [`generation`]: temperature / top-k ancestral sampling.
//! - [`training`]: objectives, barriers, AdamW and the watermark training loop.
//! - [`evaluation`]: ROC/PR curves, threshold calibration, detection reports.
//! - [`cli`]: the `binomark` command line.

pub mod binoculars;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use numerics::Real;
