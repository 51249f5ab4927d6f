//! Unbiased risk estimators for training Gaussian denoisers without clean
//! targets: SURE with analytic or Monte-Carlo divergence, the extended SURE
//! for nested noisy pairs, and Noise2Noise, together with the data synthesis,
//! denoisers, trainer and verification harness built around them.

pub mod checkpoint;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod harness;
pub mod image;
pub mod io;
pub mod metrics;
pub mod noise;
pub mod pairing;
pub mod risk;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use denoiser::{build_denoiser, Denoiser, DenoiserConfig, DenoiserKind, ParamGradient, Precision};
pub use error::{Error, Result};
pub use image::{Image, Shape};
pub use pairing::{PairedSample, PatchBatch, SampleMode, SigmaMode};
pub use rng::RngStream;
