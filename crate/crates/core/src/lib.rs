//! Deformable part model detection with structure-aware domain adaptation.
//!
//! The crate covers the full loop: HOG feature pyramids, DPM scoring with
//! generalized distance transforms, latent SVM training with hard-negative
//! mining, structure-aware adaptation of a source model to a target domain,
//! and FPPI / miss-rate evaluation. A deterministic synthetic scene generator
//! provides paired source/target domains with exact ground truth.
//!
//! Runnable walkthroughs live in `examples/`; the `dpm-adapt` binary exposes
//! the same pipeline on the command line.

pub mod adapt;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod hog;
pub mod inference;
pub mod model;
pub mod raster;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
