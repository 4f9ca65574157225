//! Video face-manipulation detector built on `afw-tensor`.
//!
//! A video is reduced to a track of face patches. Each patch is embedded by
//! a small convolutional backbone; two heads give a per-face logit and a
//! non-negative weight whose weighted mean yields `p_w`. A GRU stack reads
//! the per-face vectors (feature, logit, weight, `p_w`) and produces
//! `p_rnn`. A boosting replica trained on held-out data corrects both
//! outputs in the logit domain, and test-time augmentation averages over
//! temporally shifted and mirrored tracks.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boosting;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod trainer;

pub use detector::{CheckpointMeta, Detector, Scores};
pub use error::{CoreError, Result};
