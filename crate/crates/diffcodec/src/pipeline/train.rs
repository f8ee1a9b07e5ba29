//! Training stages.
//!
//! The chain is vae -> tagger -> denoiser -> 1 -> 2. Each stage loads the
//! previous stage's checkpoint, trains one subset of parameters, and saves
//! the complete store again, so any checkpoint in the chain is a full model.
//! Stage 1 trains the compression path (transforms, entropy model, control
//! branch) at the first rate weight; stage 2 forks one model per rate-ladder
//! entry. The tagger stage is optional: it needs labeled samples, which only
//! the synthetic source provides, and the denoiser stage falls back to the
//! vae checkpoint when no tagger checkpoint exists.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::config::{AnalysisInput, Config, DataSource, DistortionSpace};
use crate::control_guidance::{ControlBranch, ControlledModel};
use crate::dataset::{multi_hot, FolderSampler, SyntheticSampler};
use crate::diffusion_core::{diffusion_loss, diffusion_loss_with, Site};
use crate::entropy_coding::rate_gaussian_bits;
use crate::error::{Error, Result};
use crate::latent_transforms::{quantize, QuantizerMode};
use crate::nn::{randn, ParamStore};
use crate::pipeline::{composite_loss, load_dictionary, LossWeights, Models};
use crate::semantics::sc_loss_noisy;
use crate::tagging::{dropout_tags, TagSet};
use crate::vae;

pub fn vae_checkpoint(dir: &Path) -> PathBuf {
    dir.join("vae.safetensors")
}

pub fn tagger_checkpoint(dir: &Path) -> PathBuf {
    dir.join("tagger.safetensors")
}

pub fn denoiser_checkpoint(dir: &Path) -> PathBuf {
    dir.join("denoiser.safetensors")
}

pub fn stage1_checkpoint(dir: &Path) -> PathBuf {
    dir.join("stage1.safetensors")
}

/// Final per-quality checkpoint, indexed by rate-ladder position.
pub fn quality_checkpoint(dir: &Path, quality: usize) -> PathBuf {
    dir.join(format!("q{quality}.safetensors"))
}

/// Derives a per-stage stream seed so stages draw distinct data and noise
/// while the whole chain stays a pure function of the config seed.
fn stage_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
}

fn adam_params(lr: f64, config: &Config) -> ParamsAdamW {
    ParamsAdamW {
        lr,
        beta1: config.adam_beta1,
        beta2: config.adam_beta2,
        weight_decay: 0.0,
        ..Default::default()
    }
}

/// Training data source: procedurally generated labeled images, or random
/// crops from a folder (unlabeled, so tags are empty during training).
pub enum DataSampler {
    Synthetic(SyntheticSampler),
    Folder(FolderSampler),
}

impl DataSampler {
    pub fn new(config: &Config, seed: u64, device: &Device) -> Result<Self> {
        match &config.data_source {
            DataSource::Synthetic => {
                if config.tag_dictionary.is_some() {
                    return Err(Error::Config(
                        "synthetic samples are labeled with the built-in dictionary; \
                         remove tags.dictionary or use a folder source"
                            .to_string(),
                    ));
                }
                Ok(Self::Synthetic(SyntheticSampler::new(
                    config.image_size,
                    seed,
                    device.clone(),
                )?))
            }
            DataSource::Folder(dir) => Ok(Self::Folder(FolderSampler::new(
                dir,
                config.image_size,
                seed,
                device,
            )?)),
        }
    }

    pub fn batch(&mut self, n: usize) -> Result<(Tensor, Vec<TagSet>)> {
        match self {
            Self::Synthetic(s) => s.batch(n),
            Self::Folder(s) => s.batch(n, None),
        }
    }
}

/// Loss trajectory summary for one completed stage.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: String,
    pub checkpoint: PathBuf,
    pub iters: usize,
    /// Mean loss over the first tenth of iterations (at most 50).
    pub first_avg: f64,
    /// Mean loss over the last tenth of iterations (at most 50).
    pub last_avg: f64,
}

fn summarize(stage: &str, checkpoint: PathBuf, losses: &[f64]) -> StageReport {
    let w = (losses.len() / 10).clamp(1, 50).min(losses.len().max(1));
    let avg = |s: &[f64]| {
        if s.is_empty() {
            f64::NAN
        } else {
            s.iter().sum::<f64>() / s.len() as f64
        }
    };
    StageReport {
        stage: stage.to_string(),
        checkpoint,
        iters: losses.len(),
        first_avg: avg(&losses[..w.min(losses.len())]),
        last_avg: avg(&losses[losses.len().saturating_sub(w)..]),
    }
}

fn log_progress(stage: &str, it: usize, total: usize, loss: f64) {
    let every = (total / 10).max(1);
    if it % every == 0 || it + 1 == total {
        log::info!("{stage}: iter {}/{} loss {loss:.5}", it + 1, total);
    }
}

/// Runs one named stage. `"2"` produces one checkpoint per ladder entry,
/// every other stage produces exactly one.
pub fn run_stage(config: &Config, stage: &str) -> Result<Vec<StageReport>> {
    match stage {
        "vae" => Ok(vec![train_vae(config)?]),
        "tagger" => Ok(vec![train_tagger(config)?]),
        "denoiser" => Ok(vec![train_denoiser(config)?]),
        "1" => Ok(vec![train_stage1(config)?]),
        "2" => train_stage2(config),
        other => Err(Error::InvalidArgument {
            what: format!("unknown training stage {other:?}, expected vae, tagger, denoiser, 1 or 2"),
        }),
    }
}

/// Trains the autoencoder from scratch, then calibrates the latent scale so
/// downstream models see roughly unit-variance latents.
pub fn train_vae(config: &Config) -> Result<StageReport> {
    config.validate()?;
    let device = Device::Cpu;
    let dir = PathBuf::from(&config.out_dir);
    let dict = load_dictionary(config)?;
    let mut ps = ParamStore::new(config.seed, device.clone());
    let mut models = Models::build(&mut ps, config, dict, 1.0)?;
    let mut sampler = DataSampler::new(config, stage_seed(config.seed, 1), &device)?;
    let mut rng = ChaCha12Rng::seed_from_u64(stage_seed(config.seed, 101));
    let mut opt = AdamW::new(ps.vars_with_prefix(&["vae."]), adam_params(config.vae_lr, config))?;

    let mut losses = Vec::with_capacity(config.vae_iters);
    for it in 0..config.vae_iters {
        let (x, _) = sampler.batch(config.batch_size)?;
        let (total, _rec, _kl) =
            vae::train_step(&models.vae, &mut opt, &x, config.vae_kl_weight, &mut rng)?;
        losses.push(total);
        log_progress("vae", it, config.vae_iters, total);
    }

    models.latent_scale = calibrate_latent_scale(&models, &mut sampler, config)?;
    log::info!("vae: latent scale {:.5}", models.latent_scale);

    std::fs::create_dir_all(&dir)?;
    let path = vae_checkpoint(&dir);
    models.save(&ps, &path, "vae", None)?;
    Ok(summarize("vae", path, &losses))
}

/// Latent standard deviation over a calibration sample, inverted. The codec
/// and the denoiser both operate on latents multiplied by this scale.
fn calibrate_latent_scale(
    models: &Models,
    sampler: &mut DataSampler,
    config: &Config,
) -> Result<f64> {
    let want = config.train_images.clamp(1, 64);
    let mut seen = 0usize;
    let (mut sum, mut sumsq, mut count) = (0f64, 0f64, 0f64);
    while seen < want {
        let take = (want - seen).min(config.batch_size);
        let (x, _) = sampler.batch(take)?;
        let z = models.vae.encode(&x)?;
        for v in z.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            sum += v;
            sumsq += v * v;
            count += 1.0;
        }
        seen += take;
    }
    let mean = sum / count;
    let std = (sumsq / count - mean * mean).max(0.0).sqrt();
    if !std.is_finite() || std < 1e-6 {
        log::warn!("degenerate latent std {std}; keeping scale 1");
        return Ok(1.0);
    }
    Ok(1.0 / std)
}

/// Trains the tag classifier on labeled synthetic samples.
pub fn train_tagger(config: &Config) -> Result<StageReport> {
    config.validate()?;
    if !matches!(config.data_source, DataSource::Synthetic) {
        return Err(Error::Config(
            "the tagger stage needs labeled samples, which only data.source = synthetic provides"
                .to_string(),
        ));
    }
    let device = Device::Cpu;
    let dir = PathBuf::from(&config.out_dir);
    let (models, ps, _) = Models::load_with_config(vae_checkpoint(&dir), config, &device)?;
    let mut sampler = DataSampler::new(config, stage_seed(config.seed, 2), &device)?;
    let mut opt = AdamW::new(
        ps.vars_with_prefix(&["tagger."]),
        adam_params(config.tagger_lr, config),
    )?;

    let n_tags = models.dict.len();
    let mut losses = Vec::with_capacity(config.tagger_iters);
    for it in 0..config.tagger_iters {
        let (x, sets) = sampler.batch(config.batch_size)?;
        let targets = multi_hot(&sets, n_tags, &device)?;
        let loss = models.tagger.bce_loss(&x, &targets)?;
        let v = crate::nn::scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { component: "tag bce".to_string() });
        }
        opt.backward_step(&loss)?;
        losses.push(v);
        log_progress("tagger", it, config.tagger_iters, v);
    }

    let path = tagger_checkpoint(&dir);
    models.save(&ps, &path, "tagger", None)?;
    Ok(summarize("tagger", path, &losses))
}

/// Trains the conditional denoiser (and the tag embedding it conditions on)
/// on clean latents. Tag sets are dropped all-or-nothing at the configured
/// rate so the model also learns the unconditional branch guidance needs.
pub fn train_denoiser(config: &Config) -> Result<StageReport> {
    config.validate()?;
    let device = Device::Cpu;
    let dir = PathBuf::from(&config.out_dir);
    let start = tagger_checkpoint(&dir);
    let start = if start.exists() { start } else { vae_checkpoint(&dir) };
    let (models, ps, _) = Models::load_with_config(&start, config, &device)?;
    let mut sampler = DataSampler::new(config, stage_seed(config.seed, 3), &device)?;
    let mut rng = ChaCha12Rng::seed_from_u64(stage_seed(config.seed, 103));
    let mut opt = AdamW::new(
        ps.vars_with_prefix(&["denoiser.", "tags."]),
        adam_params(config.denoiser_lr, config),
    )?;

    let mut losses = Vec::with_capacity(config.denoiser_iters);
    for it in 0..config.denoiser_iters {
        let (x, sets) = sampler.batch(config.batch_size)?;
        let z = (models.vae.encode(&x)?.detach() * models.latent_scale)?;
        let dropped = sets
            .iter()
            .map(|s| dropout_tags(s, config.tag_dropout, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let cond = models.conditioner.condition(&dropped, &device)?;
        let loss = diffusion_loss(&models.denoiser, &z, &cond, &models.sched, &mut rng)?;
        let v = crate::nn::scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { component: "diffusion".to_string() });
        }
        opt.backward_step(&loss)?;
        losses.push(v);
        log_progress("denoiser", it, config.denoiser_iters, v);
    }

    let path = denoiser_checkpoint(&dir);
    models.save(&ps, &path, "denoiser", None)?;
    Ok(summarize("denoiser", path, &losses))
}

/// Parameter prefixes optimized by the codec stages. Everything else (vae,
/// denoiser, tag embedding, tagger) stays frozen.
fn codec_prefixes(models: &Models) -> Vec<&'static str> {
    let mut p = vec!["codec.", "hyper.", "prior.", "control."];
    if models.pixel_dec.is_some() {
        p.push("pixeldec.");
    }
    p
}

/// Per-step loss components of codec training, as plain values.
#[derive(Debug, Clone, Copy)]
pub struct CodecStepLosses {
    pub total: f64,
    pub rate_bpp: f64,
    pub dist: f64,
    pub diff: f64,
    pub sem: f64,
}

/// One optimization step of the compression path.
///
/// The rate term prices additive-noise surrogates of the code and hyper
/// code in bits per pixel; the synthesis path uses the straight-through
/// rounding surrogate so the decoded latent matches inference rounding in
/// the forward pass. The diffusion term runs the frozen denoiser with the
/// control branch conditioned on that decoded latent; the semantic term
/// compares denoiser features of the clean and decoded latents.
pub fn codec_train_step(
    models: &Models,
    opt: &mut AdamW,
    x: &Tensor,
    sets: &[TagSet],
    weights: &LossWeights,
    site: Site,
    config: &Config,
    rng: &mut ChaCha12Rng,
) -> Result<CodecStepLosses> {
    let device = x.device();
    let (b, _, hx, wx) = x.dims4()?;

    let z = (models.vae.encode(x)?.detach() * models.latent_scale)?;
    let y = match models.transforms.analysis_input() {
        AnalysisInput::Latent => models.transforms.analysis(&z)?,
        AnalysisInput::Pixel => models.transforms.analysis(x)?,
    };

    let y_noisy = quantize(&y, QuantizerMode::Noise, true, Some(&mut *rng))?;
    let zh = models.hyper.analysis(&y)?;
    let zh_noisy = quantize(&zh, QuantizerMode::Noise, true, Some(&mut *rng))?;
    let (mu, sigma) = models.hyper.synthesis(&zh_noisy, (y.dim(2)?, y.dim(3)?))?;
    let main_bits = rate_gaussian_bits(&y_noisy, &mu, &sigma)?;
    let hyper_bits = models.prior.rate_bits(&zh_noisy)?;
    let rate_bpp = ((main_bits + hyper_bits)? * (1.0 / (b * hx * wx) as f64))?;

    let y_ste = quantize(&y, QuantizerMode::Ste, true, None)?;
    let z_hat = models.transforms.synthesis(&y_ste)?;
    let dist = match (&models.pixel_dec, config.distortion_space) {
        (Some(px), DistortionSpace::Pixel) => {
            let x_hat = px.forward(&y_ste)?;
            (x_hat - x)?.sqr()?.mean_all()?
        }
        _ => (&z_hat - &z)?.sqr()?.mean_all()?,
    };

    let dropped = sets
        .iter()
        .map(|s| dropout_tags(s, config.tag_dropout, rng))
        .collect::<Result<Vec<_>>>()?;
    let cond = models.conditioner.condition(&dropped, device)?.detach();
    let t: Vec<usize> = (0..b)
        .map(|_| rng.random_range(1..=models.sched.t_steps()))
        .collect();
    let eps = randn(rng, z.dims(), device)?;
    let controlled = ControlledModel {
        denoiser: &models.denoiser,
        branch: &models.control,
        z_hat: z_hat.clone(),
    };
    let diff = diffusion_loss_with(&controlled, &z, &cond, &models.sched, &t, &eps)?;

    let sem = if weights.sem == 0.0 {
        Tensor::zeros((), DType::F32, device)?
    } else {
        let null = models.conditioner.null_condition(b, device)?.detach();
        sc_loss_noisy(
            &models.denoiser,
            &models.sched,
            &z,
            &z_hat,
            config.sc_t_max,
            site,
            &null,
            rng,
        )?
    };

    let total = composite_loss(&rate_bpp, &dist, &diff, &sem, weights)?;
    let out = CodecStepLosses {
        total: crate::nn::scalar(&total)?,
        rate_bpp: crate::nn::scalar(&rate_bpp)?,
        dist: crate::nn::scalar(&dist)?,
        diff: crate::nn::scalar(&diff)?,
        sem: crate::nn::scalar(&sem)?,
    };
    opt.backward_step(&total)?;
    Ok(out)
}

fn run_codec_training(
    models: &Models,
    ps: &ParamStore,
    config: &Config,
    lambda_rate: f64,
    iters: usize,
    lr: f64,
    seed_k: u64,
    label: &str,
) -> Result<Vec<f64>> {
    let device = ps.device().clone();
    let mut sampler = DataSampler::new(config, stage_seed(config.seed, seed_k), &device)?;
    let mut rng = ChaCha12Rng::seed_from_u64(stage_seed(config.seed, seed_k + 100));
    let site = Site::parse(&config.sc_site)?;
    let mut opt = AdamW::new(
        ps.vars_with_prefix(&codec_prefixes(models)),
        adam_params(lr, config),
    )?;
    let weights = LossWeights {
        rate: lambda_rate,
        dist: config.lambda_dist,
        diff: config.lambda_diff,
        sem: config.lambda_sem,
    };

    let mut losses = Vec::with_capacity(iters);
    for it in 0..iters {
        let (x, sets) = sampler.batch(config.batch_size)?;
        let step = codec_train_step(models, &mut opt, &x, &sets, &weights, site, config, &mut rng)?;
        losses.push(step.total);
        let every = (iters / 10).max(1);
        if it % every == 0 || it + 1 == iters {
            log::info!(
                "{label}: iter {}/{} total {:.5} rate {:.4}bpp dist {:.5} diff {:.5} sem {:.5}",
                it + 1,
                iters,
                step.total,
                step.rate_bpp,
                step.dist,
                step.diff,
                step.sem,
            );
        }
    }
    Ok(losses)
}

/// First codec stage: seeds the control trunk from the frozen denoiser,
/// then trains transforms, entropy model and control branch at the first
/// rate-ladder weight.
pub fn train_stage1(config: &Config) -> Result<StageReport> {
    config.validate()?;
    let device = Device::Cpu;
    let dir = PathBuf::from(&config.out_dir);
    let (models, mut ps, _) =
        Models::load_with_config(denoiser_checkpoint(&dir), config, &device)?;
    let copied = ControlBranch::copy_trunk_from(&mut ps, "denoiser", "control")?;
    log::info!("stage1: control trunk seeded from denoiser ({copied} tensors)");

    let lambda = config.rate_ladder[0];
    let losses = run_codec_training(
        &models,
        &ps,
        config,
        lambda,
        config.stage1_iters,
        config.stage1_lr,
        4,
        "stage1",
    )?;
    let path = stage1_checkpoint(&dir);
    models.save(&ps, &path, "stage1", None)?;
    Ok(summarize("stage1", path, &losses))
}

/// Second codec stage: forks the stage-1 model once per rate-ladder entry
/// and fine-tunes each fork at its own rate weight.
pub fn train_stage2(config: &Config) -> Result<Vec<StageReport>> {
    config.validate()?;
    let device = Device::Cpu;
    let dir = PathBuf::from(&config.out_dir);
    let src = stage1_checkpoint(&dir);
    let mut reports = Vec::with_capacity(config.rate_ladder.len());
    for (qi, &lambda) in config.rate_ladder.iter().enumerate() {
        let (models, ps, _) = Models::load_with_config(&src, config, &device)?;
        let label = format!("stage2 q{qi} (rate weight {lambda})");
        let losses = run_codec_training(
            &models,
            &ps,
            config,
            lambda,
            config.stage2_iters,
            config.stage2_lr,
            16 + qi as u64,
            &label,
        )?;
        let path = quality_checkpoint(&dir, qi);
        models.save(&ps, &path, "stage2", Some(qi))?;
        reports.push(summarize(&format!("stage2 q{qi}"), path, &losses));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::builtin_dictionary;
    use tempfile::tempdir;

    fn dev() -> Device {
        Device::Cpu
    }

    fn tiny_config(out_dir: &Path) -> Config {
        let mut cfg = Config::default();
        cfg.seed = 9;
        cfg.image_size = 16;
        cfg.train_images = 32;
        cfg.val_images = 8;
        cfg.vae_base_channels = 8;
        cfg.vae_iters = 2;
        cfg.codec_channels = 8;
        cfg.code_channels = 6;
        cfg.hyper_channels = 4;
        cfg.unet_channels = [8, 12];
        cfg.embed_dim = 16;
        cfg.denoiser_iters = 2;
        cfg.schedule_steps = 20;
        cfg.sc_t_max = 4;
        cfg.batch_size = 2;
        cfg.stage1_iters = 2;
        cfg.stage2_iters = 1;
        cfg.tagger_iters = 2;
        cfg.rate_ladder = vec![2.0, 8.0];
        cfg.out_dir = out_dir.to_string_lossy().into_owned();
        cfg
    }

    fn snapshot(ps: &ParamStore, prefix: &str) -> Vec<(String, Vec<f32>)> {
        ps.names()
            .into_iter()
            .filter(|n| n.starts_with(prefix))
            .map(|n| {
                let v = ps.get(&n).unwrap().as_tensor();
                (n, v.flatten_all().unwrap().to_vec1::<f32>().unwrap())
            })
            .collect()
    }

    #[test]
    fn synthetic_source_rejects_custom_dictionary() {
        let mut cfg = Config::default();
        cfg.tag_dictionary = Some("somewhere.txt".to_string());
        let err = DataSampler::new(&cfg, 1, &dev()).err().unwrap();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn unknown_stage_rejected() {
        let cfg = Config::default();
        let err = run_stage(&cfg, "3").unwrap_err();
        assert!(matches!(err, Error::InvalidArgument { .. }));
    }

    #[test]
    fn codec_step_freezes_base_and_moves_codec() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let mut ps = ParamStore::new(cfg.seed, dev());
        let models = Models::build(&mut ps, &cfg, builtin_dictionary(), 1.0).unwrap();
        ControlBranch::copy_trunk_from(&mut ps, "denoiser", "control").unwrap();

        let frozen_before: Vec<_> = ["vae.", "denoiser.", "tags.", "tagger."]
            .iter()
            .map(|p| snapshot(&ps, p))
            .collect();
        let codec_before = snapshot(&ps, "codec.");

        let mut sampler = DataSampler::new(&cfg, 3, &dev()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut opt = AdamW::new(
            ps.vars_with_prefix(&codec_prefixes(&models)),
            adam_params(1e-3, &cfg),
        )
        .unwrap();
        let weights = LossWeights { rate: 2.0, dist: 1.0, diff: 1.0, sem: 2.0 };
        for _ in 0..2 {
            let (x, sets) = sampler.batch(cfg.batch_size).unwrap();
            let step = codec_train_step(
                &models,
                &mut opt,
                &x,
                &sets,
                &weights,
                Site::Middle,
                &cfg,
                &mut rng,
            )
            .unwrap();
            assert!(step.total.is_finite());
            assert!(step.rate_bpp > 0.0, "rate must be positive, got {}", step.rate_bpp);
        }

        let frozen_after: Vec<_> = ["vae.", "denoiser.", "tags.", "tagger."]
            .iter()
            .map(|p| snapshot(&ps, p))
            .collect();
        assert_eq!(frozen_before, frozen_after, "frozen prefixes must not move");
        assert_ne!(codec_before, snapshot(&ps, "codec."), "codec params must move");
    }

    #[test]
    fn vae_stage_writes_loadable_checkpoint() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let report = train_vae(&cfg).unwrap();
        assert_eq!(report.iters, 2);
        let (models, _ps, info) = Models::load(&report.checkpoint, &dev()).unwrap();
        assert_eq!(info.stage, "vae");
        assert_eq!(info.quality_index, None);
        assert!(models.latent_scale.is_finite() && models.latent_scale > 0.0);
    }

    #[test]
    fn tagger_stage_requires_vae_checkpoint() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let err = train_tagger(&cfg).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
    }

    #[test]
    fn pixel_distortion_step_runs() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.distortion_space = DistortionSpace::Pixel;
        let mut ps = ParamStore::new(cfg.seed, dev());
        let models = Models::build(&mut ps, &cfg, builtin_dictionary(), 1.0).unwrap();
        ControlBranch::copy_trunk_from(&mut ps, "denoiser", "control").unwrap();
        let mut sampler = DataSampler::new(&cfg, 3, &dev()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut opt = AdamW::new(
            ps.vars_with_prefix(&codec_prefixes(&models)),
            adam_params(1e-3, &cfg),
        )
        .unwrap();
        let weights = LossWeights { rate: 2.0, dist: 1.0, diff: 1.0, sem: 0.0 };
        let (x, sets) = sampler.batch(2).unwrap();
        let step = codec_train_step(
            &models,
            &mut opt,
            &x,
            &sets,
            &weights,
            Site::Middle,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert!(step.total.is_finite());
        assert_eq!(step.sem, 0.0, "semantic term must be skipped at weight 0");
    }
}
