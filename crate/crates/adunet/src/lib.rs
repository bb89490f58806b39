//! Asymmetric dual-decoder U-Net for joint rain and haze removal.
//!
//! A single-branch convolutional encoder feeds four asymmetric dual-decoder
//! blocks. One decoder stream gates features with spatially-varying channel
//! fusion and windowed self-attention to isolate the contamination (rain
//! streaks, haze); the other uses globally-pooled channel gating and
//! shifted-window attention to recover scene content lost to the change in
//! atmospheric light. The restored image is the input minus both predicted
//! residuals.
//!
//! The crate bundles the network itself plus everything needed to run it at
//! desk scale: a seeded synthetic rain+haze generator, SSIM/PSNR metrics and
//! losses, an Adam training loop with plateau learning-rate decay, binary
//! checkpointing, and a batch CLI (`adunet`).

pub mod adb;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod params;
pub mod trainer;

pub use config::{load_config, NetworkConfig};
pub use error::{Error, Result};
pub use image::{FeatureMap, Image};
pub use params::ParameterStore;
