//! Curriculum domain adaptation for tiny segmentation models, driven by
//! frequency-domain distance ranking and a Hopfield feature memory.
//!
//! The pipeline: score every unlabeled target image by the distance
//! between its low-frequency amplitude spectrum and the mean source
//! spectrum ([`spectrum`]), split the ranking into easy-to-hard stages
//! ([`curriculum`]), then adapt a source-pretrained model stage by stage
//! with pseudo-labeled near-source pools and an adversarial domain
//! discriminator ([`trainer`]). The model carries an associative memory
//! of source features ([`hopfield`]) that is frozen during adaptation.
//! Everything is validated on a procedural multi-domain benchmark
//! ([`synthdata`]).
//!
//! All randomness flows from one root seed; per-component streams are
//! derived by hashing stable labels, so runs are bitwise reproducible.

pub mod artifact;
pub mod config;
pub mod curriculum;
pub mod error;
pub mod eval;
pub mod hopfield;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raster;
pub mod seed;
pub mod selfcheck;
pub mod spectrum;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
