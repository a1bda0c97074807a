//! Streaming keyword spotting.
//!
//! Causal temporal-convolution models are trained without alignments using a max-pooling
//! objective over per-frame keyword posteriors, then run frame-synchronously on audio
//! streams in float32 or int8, and evaluated as false rejection rate at a fixed number of
//! false alarms per hour.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod container;
pub mod dataio;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod losses;
pub mod models;
pub mod nncore;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
