//! Context-conditioned denoising diffusion models for reconstruction-based
//! unsupervised anomaly detection on volumetric images.

pub mod augment;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod phantom;
pub mod pipeline;
pub mod pretrain;
pub mod schedule;
pub mod seed;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
