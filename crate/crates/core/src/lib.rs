//! Multi-channel transformer speech recognition.
//!
//! Everything runs on [`autograd`], a small define-by-run reverse-mode engine
//! over dense `f64` matrices. On top of it sit a synthetic microphone-array
//! [`audio`] generator, the STFT [`features`] front end, the [`model`] itself,
//! and [`train`] / [`decode`] / [`eval`] tooling.

pub mod ablation;
pub mod audio;
pub mod autograd;
mod binio;
pub mod config;
pub mod dataset;
pub mod decode;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
