//! Latent-guided conditional perturbation generator for multi-target
//! transferable adversarial attacks, plus the bench used to evaluate it.
//!
//! The crate is organized along the pipeline:
//!
//! - [`latent`]: target-class latents, their file format and cache;
//! - [`generator`]: the conditional generator and its fusion blocks;
//! - [`mask`]: block-wise masking of perturbations during training;
//! - [`train`]: the training loop and checkpoints;
//! - [`eval`] and [`defense`]: crafting, attack success rates, defenses;
//! - [`metrics`]: feature quality, Grad-CAM area, PSNR and SSIM;
//! - [`toy`]: the synthetic desk-scale workspace;
//! - [`cli`]: the `advfuse` command line front end.

pub mod archive;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod generator;
pub mod image;
pub mod latent;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
