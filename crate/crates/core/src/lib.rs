//! Predictive uncertainty for neural decoding of multichannel EEG.
//!
//! The crate trains a compact convolutional decoder, propagates input noise
//! through it as per-unit Gaussian moments, samples dropout masks on top of
//! that to capture parameter uncertainty, and reduces uncertainty with a
//! learned mixing of corruption chains. Calibration metrics, channel
//! occlusion attribution, a synthetic EEG generator and a CLI round it out.

pub mod adf;
pub mod attribution;
pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
