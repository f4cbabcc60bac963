//! Latent flow matching for time-series generation with equivariance-regularised
//! autoencoders.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod equivariance;
pub mod error;
pub mod eval;
pub mod flow;
pub mod nets;
pub mod pipeline;
pub mod plot;
pub mod sampler;
pub mod synthetic;
pub mod transforms;
pub mod vae;

pub use error::{Error, Result};
