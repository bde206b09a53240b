//! Desk-scale continual-pretraining engine with gradient-localized updates.
//!
//! The pipeline: generate a synthetic temporal world (`data`), train a small
//! GPT-2-style decoder (`model`, `train`), profile per-layer-group gradient
//! norms on knowledge probes (`profiler`), turn profiles into freeze /
//! per-layer learning-rate plans (`tgl`), and measure salient-span perplexity
//! before and after each continual phase (`eval`).

pub mod data;
pub mod error;
pub mod eval;
pub mod fingerprint;
pub mod model;
pub mod profiler;
pub mod tensor;
pub mod tgl;
pub mod train;

pub use error::{Result, TglError};
