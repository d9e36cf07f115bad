//! dreamlink: asynchronous dual-stream diffusion for instruction-guided
//! editing of images decoded from simulated brain signals.
//!
//! The library covers the full desk-scale pipeline: a synthetic scene
//! corpus, toy latent codec and text/vision embedding towers, a simulated
//! brain-signal forward model with a learned inverse mapper, two denoising
//! U-Nets coupled through a feature adaptor and region-masked
//! cross-attention, an asynchronous two-stream sampler, adaptor training,
//! and evaluation metrics — all on deterministic, seed-addressed RNG.

pub mod attention;
pub mod config;
pub mod container;
pub mod datagen;
pub mod denoisers;
pub mod encoders;
pub mod error;
pub mod fmri;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
