//! Gradient-based influence scoring for sparse-autoencoder latents.

pub mod error;
pub mod numcore;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod datagen;
pub mod influence;
pub mod metrics;
pub mod optim;
pub mod perturb;
pub mod sae;
pub mod steer;
pub mod toylm;
