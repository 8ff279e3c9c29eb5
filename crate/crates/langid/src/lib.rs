//! Spoken language identification toolkit.
//!
//! A two-stage encoder-decoder LangId system built from scratch: log-mel
//! frontend, 1D depthwise-separable convolution encoder with global-context
//! squeeze-and-excitation, attentive temporal pooling decoder, weighted
//! cross-entropy and additive-angular-margin training, probability-sum
//! ensembling, dataset curation (energy VAD, hard-example mining,
//! representative splits), chunked streaming inference, and EER/BAC scoring.
//!
//! The crate is CPU-only and deterministic under a fixed seed. Data-parallel
//! inner loops (batch forward/backward, per-file prediction, subset search)
//! run on rayon when the default `parallel` feature is enabled and fall back
//! to sequential iteration without it.

pub mod audio;
pub mod curate;
pub mod ensemble;
pub mod error;
pub mod frontend;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod stream;
pub mod train;

pub use error::{Error, Result};
