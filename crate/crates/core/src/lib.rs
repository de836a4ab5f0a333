//! Contrastive predictive coding for speech, end to end on the CPU.
//!
//! The crate covers the reverse-mode differentiator the models run on, the
//! strided convolutional encoder with per-timestep channel normalisation, the
//! recurrent context model, four future-frame predictors, the InfoNCE
//! objective with within-speaker negatives, the training loop, the CTC
//! linear probe, ABX discriminability scoring and the file formats tying
//! them together.

pub mod ablation;
pub mod abx;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod predictor;
pub mod probe;
pub mod sequence;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
