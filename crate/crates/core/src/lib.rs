//! Evaluation, fusion and training toolkit for audio-deepfake source tracing.
//!
//! Systems are described by exported embeddings (`STEB`) and logits (`STLG`)
//! per split plus a JSON-lines manifest. On top of that the crate offers
//! classification and calibration metrics, the Fréchet distance between
//! embedding distributions, a cosine-similarity novelty detector, two-system
//! fusion and a small feedforward classifier trained in two stages
//! (real-vs-fake emphasis, then source dispersion with RegMixup and a
//! multi-class N-pair loss).

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataio;
pub mod error;
pub mod fusion;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod ood;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod system;
pub mod trainer;

pub use error::{Error, Result};
