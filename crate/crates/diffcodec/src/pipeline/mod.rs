//! End-to-end codec assembly: the full model bundle, the composite training
//! objective, and the versioned checkpoint layout shared by every stage.

pub mod codec;
pub mod metrics;
pub mod train;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::config::{Config, DistortionSpace};
use crate::control_guidance::ControlBranch;
use crate::dataset::builtin_dictionary;
use crate::diffusion_core::{NoiseSchedule, UNet};
use crate::entropy_coding::{FactorizedPrior, HyperCoder};
use crate::error::{Error, Result};
use crate::latent_transforms::{CodecTransforms, PixelSynthesis};
use crate::nn::ParamStore;
use crate::tagging::{TagClassifier, TagConditioner, TagDictionary};
use crate::vae::Vae;

/// Checkpoint metadata keys, stored as safetensors string metadata next to
/// the weights so a single file fully describes the model.
pub const META_CONFIG: &str = "config";
pub const META_LATENT_SCALE: &str = "latent_scale";
pub const META_STAGE: &str = "stage";
pub const META_QUALITY: &str = "quality_index";
pub const META_DICTIONARY: &str = "dictionary";

/// Weights applied to the four loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rate: f64,
    pub dist: f64,
    pub diff: f64,
    pub sem: f64,
}

/// Weighted sum of the four scalar loss components. Each component is
/// checked for finiteness first so a blown-up term is reported by name
/// instead of surfacing as NaN ten stages later. The sum is linear, so the
/// gradient with respect to each component is exactly its weight.
pub fn composite_loss(
    rate: &Tensor,
    dist: &Tensor,
    diff: &Tensor,
    sem: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    for (name, t) in [
        ("rate", rate),
        ("distortion", dist),
        ("diffusion", diff),
        ("semantic", sem),
    ] {
        if !crate::nn::scalar(t)?.is_finite() {
            return Err(Error::NonFiniteLoss { component: name.to_string() });
        }
    }
    let total = (((rate * w.rate)? + (dist * w.dist)?)? + ((diff * w.diff)? + (sem * w.sem)?)?)?;
    Ok(total)
}

/// Every learned module of the codec, built over one parameter store.
///
/// Construction order is fixed (vae, codec, pixeldec, hyper, prior,
/// denoiser, control, tags, tagger) so a given seed and config always
/// produce the same initialization, and a loaded checkpoint rebinds every
/// module to the stored weights without creating new variables.
pub struct Models {
    pub vae: Vae,
    pub transforms: CodecTransforms,
    pub pixel_dec: Option<PixelSynthesis>,
    pub hyper: HyperCoder,
    pub prior: FactorizedPrior,
    pub denoiser: UNet,
    pub control: ControlBranch,
    pub conditioner: TagConditioner,
    pub tagger: TagClassifier,
    pub dict: TagDictionary,
    pub sched: NoiseSchedule,
    pub latent_scale: f64,
    pub config: Config,
    pub device: Device,
}

impl Models {
    pub fn build(
        ps: &mut ParamStore,
        config: &Config,
        dict: TagDictionary,
        latent_scale: f64,
    ) -> Result<Self> {
        config.validate()?;
        if dict.is_empty() {
            return Err(Error::Dictionary("tag dictionary must not be empty".to_string()));
        }
        if !(latent_scale.is_finite() && latent_scale > 0.0) {
            return Err(Error::InvalidArgument {
                what: format!("latent scale must be positive and finite, got {latent_scale}"),
            });
        }
        let vae = Vae::new(
            ps,
            "vae",
            config.vae_downsampling,
            config.vae_latent_channels,
            config.vae_base_channels,
        )?;
        let transforms = CodecTransforms::new(
            ps,
            "codec",
            config.analysis_input,
            config.vae_latent_channels,
            config.vae_downsampling,
            config.codec_channels,
            config.code_channels,
            config.codec_downsampling,
        )?;
        let pixel_dec = match config.distortion_space {
            DistortionSpace::Latent => None,
            DistortionSpace::Pixel => Some(PixelSynthesis::new(
                ps,
                "pixeldec",
                config.code_channels,
                config.codec_channels,
                config.total_downsampling(),
            )?),
        };
        let hyper = HyperCoder::new(ps, "hyper", config.code_channels, config.hyper_channels)?;
        let prior = FactorizedPrior::new(ps, "prior", config.hyper_channels)?;
        let denoiser = UNet::new(
            ps,
            "denoiser",
            config.vae_latent_channels,
            config.unet_channels,
            config.embed_dim,
        )?;
        let control = ControlBranch::new(
            ps,
            "control",
            config.vae_latent_channels,
            config.unet_channels,
            config.embed_dim,
        )?;
        let conditioner = TagConditioner::new(ps, "tags", dict.len(), config.embed_dim)?;
        let tagger = TagClassifier::new(ps, "tagger", dict.len())?;
        let sched =
            NoiseSchedule::scaled_linear(config.schedule_steps, config.beta_start, config.beta_end)?;
        Ok(Self {
            vae,
            transforms,
            pixel_dec,
            hyper,
            prior,
            denoiser,
            control,
            conditioner,
            tagger,
            dict,
            sched,
            latent_scale,
            config: config.clone(),
            device: ps.device().clone(),
        })
    }

    /// Writes the full parameter store plus self-describing metadata. Every
    /// stage saves everything it holds, trained or not, so the next stage
    /// (or inference) needs exactly one file.
    pub fn save(
        &self,
        ps: &ParamStore,
        path: impl AsRef<Path>,
        stage: &str,
        quality_index: Option<usize>,
    ) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert(META_CONFIG.to_string(), self.config.to_config_string());
        meta.insert(META_LATENT_SCALE.to_string(), format!("{}", self.latent_scale));
        meta.insert(META_STAGE.to_string(), stage.to_string());
        meta.insert(META_DICTIONARY.to_string(), self.dict.tags().join("\n"));
        if let Some(q) = quality_index {
            meta.insert(META_QUALITY.to_string(), q.to_string());
        }
        ps.save(path, &meta)
    }

    /// Loads a checkpoint written by [`Models::save`]: reads the stored
    /// config, dictionary and latent scale, then rebinds all modules to the
    /// stored variables. No new variables are created on this path.
    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<(Self, ParamStore, StageInfo)> {
        Self::load_inner(path.as_ref(), None, device)
    }

    /// Like [`Models::load`], but builds against the given config instead of
    /// the stored one, so a training stage can change schedule, loss or
    /// iteration settings between runs. The dictionary and latent scale
    /// always come from the checkpoint; an architecture mismatch surfaces as
    /// a typed error (added variables or a parameter shape conflict).
    pub fn load_with_config(
        path: impl AsRef<Path>,
        config: &Config,
        device: &Device,
    ) -> Result<(Self, ParamStore, StageInfo)> {
        Self::load_inner(path.as_ref(), Some(config), device)
    }

    fn load_inner(
        path: &Path,
        config_override: Option<&Config>,
        device: &Device,
    ) -> Result<(Self, ParamStore, StageInfo)> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.display().to_string()));
        }
        let (mut ps, meta) = ParamStore::load(path, 0, device.clone())?;
        let config = match config_override {
            Some(c) => c.clone(),
            None => {
                let text = meta.get(META_CONFIG).ok_or_else(|| {
                    Error::Checkpoint("checkpoint has no config metadata".to_string())
                })?;
                Config::from_str_contents(text)?
            }
        };
        let dict_text = meta.get(META_DICTIONARY).ok_or_else(|| {
            Error::Checkpoint("checkpoint has no dictionary metadata".to_string())
        })?;
        let dict = TagDictionary::from_tags(dict_text.lines())?;
        let latent_scale = meta
            .get(META_LATENT_SCALE)
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| {
                Error::Checkpoint("checkpoint has no latent scale metadata".to_string())
            })?;
        let n_before = ps.num_params();
        let models = Self::build(&mut ps, &config, dict, latent_scale)?;
        if ps.num_params() != n_before {
            return Err(Error::Checkpoint(format!(
                "config does not match checkpoint {}: the build added variables",
                path.display()
            )));
        }
        let stage = meta.get(META_STAGE).cloned().unwrap_or_default();
        let quality_index = meta.get(META_QUALITY).and_then(|s| s.parse::<usize>().ok());
        Ok((models, ps, StageInfo { stage, quality_index }))
    }
}

/// Which training stage produced a checkpoint, and the rate-ladder slot for
/// final-stage models.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageInfo {
    pub stage: String,
    pub quality_index: Option<usize>,
}

/// Loads the tag dictionary named by the config, or the built-in shape and
/// color vocabulary when none is configured.
pub fn load_dictionary(config: &Config) -> Result<TagDictionary> {
    match &config.tag_dictionary {
        Some(path) => TagDictionary::from_file(path),
        None => Ok(builtin_dictionary()),
    }
}
