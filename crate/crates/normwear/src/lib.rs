//! Multivariate wearable-signal foundation model, desk scale.
//!
//! The pipeline: raw multichannel signal windows are canonicalized to
//! 65 Hz / 6 s, turned into 3-layer Mexican-Hat CWT scalogram stacks per
//! channel, patch-embedded, and encoded by a shared-weight transformer whose
//! per-channel [CLS] tokens exchange information through channel-aware
//! fusion layers. Pretraining is a masked autoencoder reconstructing the
//! raw series. A memory-stream-style temporal fusion head aligns pooled
//! signal representations with text embeddings for zero-shot retrieval, and
//! an evaluation harness runs linear probing with deterministic solvers.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod msitf;
pub mod pretrain;
pub mod rng;
pub mod scalogram;
pub mod signal;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
