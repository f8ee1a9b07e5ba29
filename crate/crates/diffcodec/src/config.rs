//! Flat key-value configuration file support.
//!
//! The config format is one `key = value` pair per line, `#` starts a
//! comment. Unknown keys are rejected so typos fail fast. Every key has a
//! default; an empty file is a valid config.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Which space the distortion loss is computed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistortionSpace {
    /// Distortion between VAE latents (default).
    Latent,
    /// Distortion between pixels, using the pixel-resolution synthesis head.
    Pixel,
}

/// Input fed to the analysis transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalysisInput {
    /// Analysis consumes the VAE latent (default).
    Latent,
    /// Analysis consumes raw pixels and downsamples internally.
    Pixel,
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    /// Procedurally generated labeled shape images.
    Synthetic,
    /// Random patches cropped from images in a folder.
    Folder(String),
}

/// Runtime configuration for models, training and inference.
///
/// Field names map 1:1 to config-file keys, listed in the README.
#[derive(Debug, Clone)]
pub struct Config {
    pub seed: u64,

    // data
    pub data_source: DataSource,
    pub image_size: usize,
    pub train_images: usize,
    pub val_images: usize,

    // vae
    pub vae_downsampling: usize,
    pub vae_latent_channels: usize,
    pub vae_base_channels: usize,
    pub vae_kl_weight: f64,
    pub vae_iters: usize,
    pub vae_lr: f64,

    // analysis/synthesis transforms
    pub codec_channels: usize,
    pub code_channels: usize,
    pub codec_downsampling: usize,
    pub analysis_input: AnalysisInput,

    // entropy model
    pub hyper_channels: usize,

    // denoiser
    pub unet_channels: [usize; 2],
    pub embed_dim: usize,
    pub denoiser_iters: usize,
    pub denoiser_lr: f64,

    // noise schedule
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    // semantic consistency loss
    pub sc_site: String,
    pub sc_t_max: usize,

    // loss weights
    pub lambda_dist: f64,
    pub lambda_diff: f64,
    pub lambda_sem: f64,
    pub rate_ladder: Vec<f64>,
    pub distortion_space: DistortionSpace,

    // training
    pub batch_size: usize,
    pub stage1_iters: usize,
    pub stage1_lr: f64,
    pub stage2_iters: usize,
    pub stage2_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub tag_dropout: f64,
    pub tagger_iters: usize,
    pub tagger_lr: f64,
    pub out_dir: String,

    // tags
    pub tag_dictionary: Option<String>,

    // inference
    pub ddim_steps: usize,
    pub cfg_scale: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 7,

            data_source: DataSource::Synthetic,
            image_size: 64,
            train_images: 512,
            val_images: 64,

            vae_downsampling: 4,
            vae_latent_channels: 4,
            vae_base_channels: 32,
            vae_kl_weight: 1e-6,
            vae_iters: 3000,
            vae_lr: 1e-3,

            codec_channels: 64,
            code_channels: 64,
            codec_downsampling: 2,
            analysis_input: AnalysisInput::Latent,

            hyper_channels: 32,

            unet_channels: [64, 128],
            embed_dim: 128,
            denoiser_iters: 4000,
            denoiser_lr: 1e-3,

            schedule_steps: 1000,
            beta_start: 8.5e-4,
            beta_end: 1.2e-2,

            sc_site: "middle".to_string(),
            sc_t_max: 0,

            lambda_dist: 1.0,
            lambda_diff: 1.0,
            lambda_sem: 2.0,
            rate_ladder: vec![2.0, 4.0, 8.0, 16.0, 32.0],
            distortion_space: DistortionSpace::Latent,

            batch_size: 8,
            stage1_iters: 20_000,
            stage1_lr: 1e-4,
            stage2_iters: 20_000,
            stage2_lr: 5e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            tag_dropout: 0.1,
            tagger_iters: 1500,
            tagger_lr: 1e-3,
            out_dir: "checkpoints".to_string(),

            tag_dictionary: None,

            ddim_steps: 50,
            cfg_scale: 5.0,
        }
    }
}

impl Config {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn u(v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("expected unsigned integer, got {v:?}")))
        }
        fn f(v: &str) -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("expected number, got {v:?}")))
        }
        match key {
            "seed" => {
                self.seed = v_u64(value)?;
            }
            "data.source" => {
                self.data_source = match value {
                    "synthetic" => DataSource::Synthetic,
                    other => DataSource::Folder(other.to_string()),
                };
            }
            "data.image_size" => self.image_size = u(value)?,
            "data.train_images" => self.train_images = u(value)?,
            "data.val_images" => self.val_images = u(value)?,
            "vae.downsampling" => self.vae_downsampling = u(value)?,
            "vae.latent_channels" => self.vae_latent_channels = u(value)?,
            "vae.base_channels" => self.vae_base_channels = u(value)?,
            "vae.kl_weight" => self.vae_kl_weight = f(value)?,
            "vae.iters" => self.vae_iters = u(value)?,
            "vae.lr" => self.vae_lr = f(value)?,
            "codec.channels" => self.codec_channels = u(value)?,
            "codec.code_channels" => self.code_channels = u(value)?,
            "codec.downsampling" => self.codec_downsampling = u(value)?,
            "codec.analysis_input" => {
                self.analysis_input = match value {
                    "latent" => AnalysisInput::Latent,
                    "pixel" => AnalysisInput::Pixel,
                    other => {
                        return Err(Error::Config(format!(
                            "codec.analysis_input must be latent or pixel, got {other:?}"
                        )))
                    }
                };
            }
            "hyper.channels" => self.hyper_channels = u(value)?,
            "unet.channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| u(p.trim()))
                    .collect::<Result<_>>()?;
                if parts.len() != 2 {
                    return Err(Error::Config(
                        "unet.channels expects two comma-separated widths".to_string(),
                    ));
                }
                self.unet_channels = [parts[0], parts[1]];
            }
            "unet.embed_dim" => self.embed_dim = u(value)?,
            "denoiser.iters" => self.denoiser_iters = u(value)?,
            "denoiser.lr" => self.denoiser_lr = f(value)?,
            "schedule.steps" => self.schedule_steps = u(value)?,
            "schedule.beta_start" => self.beta_start = f(value)?,
            "schedule.beta_end" => self.beta_end = f(value)?,
            "sc.site" => self.sc_site = value.to_string(),
            "sc.t_max" => self.sc_t_max = u(value)?,
            "loss.lambda_dist" => self.lambda_dist = f(value)?,
            "loss.lambda_diff" => self.lambda_diff = f(value)?,
            "loss.lambda_sem" => self.lambda_sem = f(value)?,
            "loss.rate_ladder" => {
                self.rate_ladder = value
                    .split(',')
                    .map(|p| f(p.trim()))
                    .collect::<Result<_>>()?;
                if self.rate_ladder.is_empty() {
                    return Err(Error::Config("loss.rate_ladder must not be empty".into()));
                }
            }
            "loss.distortion_space" => {
                self.distortion_space = match value {
                    "latent" => DistortionSpace::Latent,
                    "pixel" => DistortionSpace::Pixel,
                    other => {
                        return Err(Error::Config(format!(
                            "loss.distortion_space must be latent or pixel, got {other:?}"
                        )))
                    }
                };
            }
            "train.batch_size" => self.batch_size = u(value)?,
            "train.stage1_iters" => self.stage1_iters = u(value)?,
            "train.stage1_lr" => self.stage1_lr = f(value)?,
            "train.stage2_iters" => self.stage2_iters = u(value)?,
            "train.stage2_lr" => self.stage2_lr = f(value)?,
            "train.adam_beta1" => self.adam_beta1 = f(value)?,
            "train.adam_beta2" => self.adam_beta2 = f(value)?,
            "train.tag_dropout" => self.tag_dropout = f(value)?,
            "train.tagger_iters" => self.tagger_iters = u(value)?,
            "train.tagger_lr" => self.tagger_lr = f(value)?,
            "train.out_dir" => self.out_dir = value.to_string(),
            "tags.dictionary" => self.tag_dictionary = Some(value.to_string()),
            "infer.ddim_steps" => self.ddim_steps = u(value)?,
            "infer.cfg_scale" => self.cfg_scale = f(value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.vae_downsampling.is_power_of_two() {
            return Err(Error::Config(
                "vae.downsampling must be a power of two".into(),
            ));
        }
        if self.schedule_steps < 1 {
            return Err(Error::Config("schedule.steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tag_dropout) {
            return Err(Error::Config("train.tag_dropout must lie in [0, 1]".into()));
        }
        if self.sc_t_max > self.schedule_steps {
            return Err(Error::Config(
                "sc.t_max must not exceed schedule.steps".into(),
            ));
        }
        Ok(())
    }

    /// Spatial factor between image and code tensor.
    pub fn total_downsampling(&self) -> usize {
        self.vae_downsampling * self.codec_downsampling
    }

    /// Serializes the configuration back to the flat key-value format.
    pub fn to_config_string(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        map.insert("seed", self.seed.to_string());
        map.insert(
            "data.source",
            match &self.data_source {
                DataSource::Synthetic => "synthetic".to_string(),
                DataSource::Folder(p) => p.clone(),
            },
        );
        map.insert("data.image_size", self.image_size.to_string());
        map.insert("data.train_images", self.train_images.to_string());
        map.insert("data.val_images", self.val_images.to_string());
        map.insert("vae.downsampling", self.vae_downsampling.to_string());
        map.insert(
            "vae.latent_channels",
            self.vae_latent_channels.to_string(),
        );
        map.insert("vae.base_channels", self.vae_base_channels.to_string());
        map.insert("vae.kl_weight", fmt_f64(self.vae_kl_weight));
        map.insert("vae.iters", self.vae_iters.to_string());
        map.insert("vae.lr", fmt_f64(self.vae_lr));
        map.insert("codec.channels", self.codec_channels.to_string());
        map.insert("codec.code_channels", self.code_channels.to_string());
        map.insert(
            "codec.downsampling",
            self.codec_downsampling.to_string(),
        );
        map.insert(
            "codec.analysis_input",
            match self.analysis_input {
                AnalysisInput::Latent => "latent".to_string(),
                AnalysisInput::Pixel => "pixel".to_string(),
            },
        );
        map.insert("hyper.channels", self.hyper_channels.to_string());
        map.insert(
            "unet.channels",
            format!("{},{}", self.unet_channels[0], self.unet_channels[1]),
        );
        map.insert("unet.embed_dim", self.embed_dim.to_string());
        map.insert("denoiser.iters", self.denoiser_iters.to_string());
        map.insert("denoiser.lr", fmt_f64(self.denoiser_lr));
        map.insert("schedule.steps", self.schedule_steps.to_string());
        map.insert("schedule.beta_start", fmt_f64(self.beta_start));
        map.insert("schedule.beta_end", fmt_f64(self.beta_end));
        map.insert("sc.site", self.sc_site.clone());
        map.insert("sc.t_max", self.sc_t_max.to_string());
        map.insert("loss.lambda_dist", fmt_f64(self.lambda_dist));
        map.insert("loss.lambda_diff", fmt_f64(self.lambda_diff));
        map.insert("loss.lambda_sem", fmt_f64(self.lambda_sem));
        map.insert(
            "loss.rate_ladder",
            self.rate_ladder
                .iter()
                .map(|v| fmt_f64(*v))
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert(
            "loss.distortion_space",
            match self.distortion_space {
                DistortionSpace::Latent => "latent".to_string(),
                DistortionSpace::Pixel => "pixel".to_string(),
            },
        );
        map.insert("train.batch_size", self.batch_size.to_string());
        map.insert("train.stage1_iters", self.stage1_iters.to_string());
        map.insert("train.stage1_lr", fmt_f64(self.stage1_lr));
        map.insert("train.stage2_iters", self.stage2_iters.to_string());
        map.insert("train.stage2_lr", fmt_f64(self.stage2_lr));
        map.insert("train.adam_beta1", fmt_f64(self.adam_beta1));
        map.insert("train.adam_beta2", fmt_f64(self.adam_beta2));
        map.insert("train.tag_dropout", fmt_f64(self.tag_dropout));
        map.insert("train.tagger_iters", self.tagger_iters.to_string());
        map.insert("train.tagger_lr", fmt_f64(self.tagger_lr));
        map.insert("train.out_dir", self.out_dir.clone());
        if let Some(d) = &self.tag_dictionary {
            map.insert("tags.dictionary", d.clone());
        }
        map.insert("infer.ddim_steps", self.ddim_steps.to_string());
        map.insert("infer.cfg_scale", fmt_f64(self.cfg_scale));

        let mut out = String::new();
        for (k, v) in map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

fn fmt_f64(v: f64) -> String {
    // Round-trippable float formatting.
    let s = format!("{v}");
    if s.parse::<f64>() == Ok(v) {
        s
    } else {
        format!("{v:e}")
    }
}

fn v_u64(v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("expected unsigned integer, got {v:?}")))
}
