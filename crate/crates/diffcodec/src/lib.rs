//! Generative image codec built around a diffusion decoder.
//!
//! Images are mapped to a compact latent code by a VAE encoder followed by
//! an analysis transform, entropy-coded with a hyperprior model, and
//! reconstructed by a conditional diffusion sampler whose control branch is
//! driven by the decoded code. Optional semantic tags ride along in the
//! bitstream and steer the sampler through classifier-free guidance.
//!
//! Module map:
//! - [`vae`]: pixel/latent autoencoder.
//! - [`latent_transforms`]: analysis and synthesis transforms plus the
//!   quantizer with its train and inference modes.
//! - [`entropy_coding`]: range coder, conditional Gaussian model and the
//!   learned factorized prior for hyper-latents.
//! - [`bitstream`]: the serialized `.dicmh` container.
//! - [`diffusion_core`]: noise schedule, denoiser network and deterministic
//!   sampler.
//! - [`control_guidance`]: control branch injecting code features into the
//!   denoiser and classifier-free guidance mixing.
//! - [`semantics`]: denoiser feature extraction and the feature-space
//!   consistency loss.
//! - [`tagging`]: tag dictionary, fixed-width tag codec and the tag
//!   predictor trained on denoiser features.
//! - [`pipeline`]: training stages, end-to-end encode/decode and metrics.

pub mod bitstream;
pub mod config;
pub mod control_guidance;
pub mod dataset;
pub mod diffusion_core;
pub mod entropy_coding;
pub mod error;
pub mod image;
pub mod latent_transforms;
pub mod nn;
pub mod pipeline;
pub mod semantics;
pub mod tagging;
pub mod vae;

pub use error::{CodingError, Error, ParseError, Result};
