//! Offline saccade decoding from endovascular neural recordings.
//!
//! The crate covers the full offline chain: a synthetic session generator
//! with planted ground truth, zero-phase FIR preprocessing and resampling,
//! cardiac artefact suppression, ICA and xDAWN spatial filtering, gaze-based
//! saccade labelling and epoching, feature extraction, ERP / r² /
//! spectrogram analysis, classifiers and leave-one-run-out evaluation.

// Validation checks are written `!(x > 0.0)` on purpose so NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod artifacts;
pub mod classify;
pub mod decompose;
pub mod dsp;
pub mod epoching;
pub mod evaluate;
pub mod error;
pub mod features;
pub mod io;
pub mod linalg;
pub mod model;
pub mod preprocess;
pub mod synthgen;

pub use error::{Error, Result};
