//! A desk-scale laboratory for masked diffusion language models.
//!
//! The crate covers the absorbing forward process, a synthetic corpus with an
//! exact likelihood, a small trainable denoiser, the family of reverse-process
//! decoders (categorical, LLADA, semi-autoregressive, top-k with global
//! normalization, convolutional reweighting, EOS-fill, caching), preference
//! fine-tuning against rule-generated repetition negatives, diagnostics, and
//! an analytic hazard model of decoding schedules.

pub mod corpus;
pub mod decoding;
pub mod denoiser;
pub mod error;
pub mod hazard;
pub mod metrics;
pub mod r2ft;
pub mod rng;
pub mod schedule;
pub mod state;
pub mod vocab;

pub use error::{Error, Result};
