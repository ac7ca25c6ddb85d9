//! Pose-guided character animation with a reference-conditioned latent video
//! diffusion model, built small enough to train on a laptop CPU.

pub mod attention;
pub mod autoencoder;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod imaging;
pub mod layers;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
