//! Image encoding and decoding against a trained model bundle.
//!
//! Encoding rounds the analysis outputs to integers, prices them with the
//! learned entropy models, and range-codes two sections: the hyper code
//! under the factorized prior, then the main code under the Gaussian
//! parameters predicted from the hyper code. Decoding mirrors the symbol
//! order exactly, so the decoded latent is bit-identical to the encoder's
//! before the diffusion sampler reconstructs pixels from it.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::bitstream::Container;
use crate::config::AnalysisInput;
use crate::control_guidance::ControlledModel;
use crate::diffusion_core::sample;
use crate::entropy_coding::{
    rate_gaussian_bits, CdfTable, RangeDecoder, RangeEncoder, RateEstimate, SUPPORT_MAX,
    SUPPORT_MIN,
};
use crate::error::{Error, Result};
use crate::latent_transforms::{quantize, QuantizerMode};
use crate::pipeline::Models;
use crate::tagging::{extract_tags, TagSet};

/// Everything `encode_image` produces. The quantized tensors are exposed so
/// callers can verify that a decode reproduced them exactly.
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub container: Container,
    pub estimate: RateEstimate,
    /// Rounded main code, (1, M, h/s, w/s).
    pub y_hat: Tensor,
    /// Rounded hyper code.
    pub zh_hat: Tensor,
    /// Decoded latent, the synthesis of `y_hat`.
    pub z_hat: Tensor,
}

/// Result of decoding a container.
pub struct Decoded {
    /// Reconstructed image, (3, H, W) in [0, 1].
    pub image: Tensor,
    /// Decoded latent driving the control branch.
    pub z_hat: Tensor,
    pub y_hat: Tensor,
    pub zh_hat: Tensor,
    pub tags: TagSet,
}

/// Runs the tag classifier on one (3, H, W) image.
pub fn extract_image_tags(models: &Models, image: &Tensor) -> Result<TagSet> {
    extract_tags(&models.tagger, image)
}

/// Rounds to integers and clips to the coder's symbol support. Values
/// outside the support only occur on badly mismatched inputs, so clipping
/// is logged rather than silent.
fn clamp_round(t: &Tensor, what: &str) -> Result<Tensor> {
    let rounded = quantize(t, QuantizerMode::Round, false, None)?;
    let clamped = rounded.clamp(SUPPORT_MIN as f64, SUPPORT_MAX as f64)?;
    let moved = crate::nn::scalar(&(&clamped - &rounded)?.abs()?.max_all()?)?;
    if moved > 0.0 {
        log::warn!("{what} values clipped to the coder support [{SUPPORT_MIN}, {SUPPORT_MAX}]");
    }
    // Rounding maps small negatives to -0.0; adding zero canonicalizes the
    // sign so the coded tensor is bit-identical to its decoded twin.
    Ok(clamped.affine(1.0, 0.0)?)
}

fn to_symbols(t: &Tensor) -> Result<Vec<i32>> {
    Ok(t.flatten_all()?
        .to_vec1::<f32>()?
        .into_iter()
        .map(|v| v as i32)
        .collect())
}

/// Compresses one (3, H, W) image in [0, 1]. Height and width must be
/// multiples of the total downsampling factor and fit the header fields.
pub fn encode_image(
    models: &Models,
    image: &Tensor,
    tags: &TagSet,
    quality: usize,
) -> Result<Encoded> {
    let ladder = models.config.rate_ladder.len();
    if quality >= ladder || quality > u8::MAX as usize {
        return Err(Error::InvalidArgument {
            what: format!("quality index {quality} outside the {ladder}-entry rate ladder"),
        });
    }
    let dims = image.dims();
    if dims.len() != 3 || dims[0] != 3 {
        return Err(Error::Shape {
            context: "encode input".to_string(),
            expected: "(3, H, W)".to_string(),
            got: format!("{dims:?}"),
        });
    }
    let (h, w) = (dims[1], dims[2]);
    let f = models.config.total_downsampling();
    for (what, v) in [("image height", h), ("image width", w)] {
        if v == 0 || v % f != 0 {
            return Err(Error::NotDivisible { what: what.to_string(), value: v, by: f });
        }
        if v > u16::MAX as usize {
            return Err(Error::InvalidArgument {
                what: format!("{what} {v} exceeds the header limit {}", u16::MAX),
            });
        }
    }

    let x = image.unsqueeze(0)?;
    let z = (models.vae.encode(&x)?.detach() * models.latent_scale)?;
    let y = match models.transforms.analysis_input() {
        AnalysisInput::Latent => models.transforms.analysis(&z)?,
        AnalysisInput::Pixel => models.transforms.analysis(&x)?,
    };
    let y_hat = clamp_round(&y, "code")?;
    let zh_hat = clamp_round(&models.hyper.analysis(&y)?, "hyper code")?;
    let (mu, sigma) = models.hyper.synthesis(&zh_hat, (y.dim(2)?, y.dim(3)?))?;

    let estimate = RateEstimate {
        main_bits: crate::nn::scalar(&rate_gaussian_bits(&y_hat, &mu, &sigma)?)?,
        hyper_bits: crate::nn::scalar(&models.prior.rate_bits(&zh_hat)?)?,
    };

    let hyper = encode_hyper(models, &zh_hat)?;
    let main = encode_main(&y_hat, &mu, &sigma)?;
    let z_hat = models.transforms.synthesis(&y_hat)?;

    let container = Container {
        quality_index: quality as u8,
        width: w as u16,
        height: h as u16,
        tags: tags.clone(),
        hyper,
        main,
    };
    let bytes = container.assemble()?;
    Ok(Encoded { bytes, container, estimate, y_hat, zh_hat, z_hat })
}

/// Hyper section: each channel is coded under its own factorized-prior
/// table, elements in row-major tensor order.
fn encode_hyper(models: &Models, zh_hat: &Tensor) -> Result<Vec<u8>> {
    let tables = models.prior.build_tables(SUPPORT_MIN, SUPPORT_MAX)?;
    let (_, c, hh, wh) = zh_hat.dims4()?;
    let plane = hh * wh;
    let mut enc = RangeEncoder::new();
    for (i, sym) in to_symbols(zh_hat)?.into_iter().enumerate() {
        enc.encode_symbol(sym, &tables[(i / plane) % c])?;
    }
    Ok(enc.finish())
}

/// Main section: each element is coded under a Gaussian table built from
/// its predicted mean and scale, in row-major tensor order.
fn encode_main(y_hat: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Vec<u8>> {
    let mus = mu.flatten_all()?.to_vec1::<f32>()?;
    let sigmas = sigma.flatten_all()?.to_vec1::<f32>()?;
    let mut enc = RangeEncoder::new();
    for ((sym, m), s) in to_symbols(y_hat)?.into_iter().zip(&mus).zip(&sigmas) {
        let table = CdfTable::gaussian(*m as f64, *s as f64, SUPPORT_MIN, SUPPORT_MAX)?;
        enc.encode_symbol(sym, &table)?;
    }
    Ok(enc.finish())
}

/// Parses and decodes a complete bitstream.
pub fn decode_bytes(
    models: &Models,
    bytes: &[u8],
    steps: usize,
    cfg_scale: f64,
    seed: u64,
) -> Result<Decoded> {
    let container = Container::parse(bytes)?;
    decode_container(models, &container, steps, cfg_scale, seed)
}

/// Decodes a parsed container: reconstructs the code tensors losslessly,
/// then samples pixels with the guided diffusion model. The sampler is
/// seeded explicitly so a given (bitstream, seed) pair always reproduces
/// the same image.
pub fn decode_container(
    models: &Models,
    container: &Container,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
) -> Result<Decoded> {
    container.check_quality(models.config.rate_ladder.len())?;
    let (h, w) = (container.height as usize, container.width as usize);
    let f = models.config.total_downsampling();
    for (what, v) in [("coded height", h), ("coded width", w)] {
        if v % f != 0 {
            return Err(Error::NotDivisible { what: what.to_string(), value: v, by: f });
        }
    }
    let device = &models.device;
    let vae_f = models.config.vae_downsampling;
    let s = models.config.codec_downsampling;
    let (h_l, w_l) = (h / vae_f, w / vae_f);
    let (h_c, w_c) = (h_l / s, w_l / s);
    let (hh, wh) = (h_c.div_ceil(2), w_c.div_ceil(2));

    let zh_hat = decode_hyper(models, &container.hyper, hh, wh)?;
    let (mu, sigma) = models.hyper.synthesis(&zh_hat, (h_c, w_c))?;
    let y_hat = decode_main(models, &container.main, &mu, &sigma)?;
    let z_hat = models.transforms.synthesis(&y_hat)?;

    let cond = models
        .conditioner
        .condition(std::slice::from_ref(&container.tags), device)?;
    let uncond = models.conditioner.null_condition(1, device)?;
    let controlled = ControlledModel {
        denoiser: &models.denoiser,
        branch: &models.control,
        z_hat: z_hat.clone(),
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let z0 = sample(
        &controlled,
        &cond,
        &uncond,
        &models.sched,
        steps,
        cfg_scale,
        &[1, models.config.vae_latent_channels, h_l, w_l],
        &mut rng,
    )?;
    let image = models.vae.decode(&(z0 / models.latent_scale)?)?.squeeze(0)?;
    Ok(Decoded { image, z_hat, y_hat, zh_hat, tags: container.tags.clone() })
}

fn decode_hyper(models: &Models, bytes: &[u8], hh: usize, wh: usize) -> Result<Tensor> {
    let tables = models.prior.build_tables(SUPPORT_MIN, SUPPORT_MAX)?;
    let c = models.config.hyper_channels;
    let plane = hh * wh;
    let mut dec = RangeDecoder::new(bytes)?;
    let mut vals = Vec::with_capacity(c * plane);
    for i in 0..c * plane {
        vals.push(dec.decode_symbol(&tables[(i / plane) % c])? as f32);
    }
    Ok(Tensor::from_vec(vals, (1, c, hh, wh), &models.device)?)
}

fn decode_main(models: &Models, bytes: &[u8], mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    let mus = mu.flatten_all()?.to_vec1::<f32>()?;
    let sigmas = sigma.flatten_all()?.to_vec1::<f32>()?;
    let mut dec = RangeDecoder::new(bytes)?;
    let mut vals = Vec::with_capacity(mus.len());
    for (m, s) in mus.iter().zip(&sigmas) {
        let table = CdfTable::gaussian(*m as f64, *s as f64, SUPPORT_MIN, SUPPORT_MAX)?;
        vals.push(dec.decode_symbol(&table)? as f32);
    }
    Ok(Tensor::from_vec(vals, mu.dims(), &models.device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::dataset::{builtin_dictionary, SyntheticSampler};
    use crate::nn::ParamStore;
    use candle_core::Device;

    fn dev() -> Device {
        Device::Cpu
    }

    fn tiny_models(seed: u64) -> Models {
        let mut cfg = Config::default();
        cfg.image_size = 16;
        cfg.vae_base_channels = 8;
        cfg.codec_channels = 8;
        cfg.code_channels = 6;
        cfg.hyper_channels = 4;
        cfg.unet_channels = [8, 12];
        cfg.embed_dim = 16;
        cfg.schedule_steps = 20;
        let mut ps = ParamStore::new(seed, dev());
        Models::build(&mut ps, &cfg, builtin_dictionary(), 1.0).unwrap()
    }

    fn test_image(size: usize, seed: u64) -> Tensor {
        SyntheticSampler::new(size, seed, dev()).unwrap().sample().unwrap().image
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        crate::nn::scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
    }

    #[test]
    fn roundtrip_reproduces_codes_exactly() {
        let models = tiny_models(3);
        let img = test_image(16, 1);
        let tags = TagSet::new(vec![1, 5]);
        let enc = encode_image(&models, &img, &tags, 1).unwrap();
        let dec = decode_bytes(&models, &enc.bytes, 2, 1.0, 7).unwrap();

        assert_eq!(max_abs(&enc.y_hat, &dec.y_hat), 0.0, "main code must be lossless");
        assert_eq!(max_abs(&enc.zh_hat, &dec.zh_hat), 0.0, "hyper code must be lossless");
        assert_eq!(max_abs(&enc.z_hat, &dec.z_hat), 0.0, "decoded latent must match");
        assert_eq!(dec.tags.ids(), tags.ids());
        assert_eq!(dec.image.dims(), &[3, 16, 16]);
    }

    #[test]
    fn container_fields_survive_assembly() {
        let models = tiny_models(3);
        let img = test_image(16, 2);
        let enc = encode_image(&models, &img, &TagSet::empty(), 0).unwrap();
        let parsed = Container::parse(&enc.bytes).unwrap();
        assert_eq!(parsed, enc.container);
        assert_eq!(parsed.width, 16);
        assert_eq!(parsed.height, 16);
    }

    #[test]
    fn actual_bits_track_estimate() {
        let models = tiny_models(4);
        for seed in 0..4 {
            let img = test_image(16, seed);
            let enc = encode_image(&models, &img, &TagSet::empty(), 0).unwrap();
            let actual =
                8.0 * (enc.container.hyper.len() + enc.container.main.len()) as f64;
            let bound = 1.05 * enc.estimate.total_bits() + 128.0;
            assert!(
                actual <= bound,
                "coded {actual} bits, bound {bound} (estimate {})",
                enc.estimate.total_bits()
            );
        }
    }

    #[test]
    fn decode_is_seed_deterministic() {
        let models = tiny_models(5);
        let img = test_image(16, 3);
        let enc = encode_image(&models, &img, &TagSet::empty(), 2).unwrap();
        let a = decode_bytes(&models, &enc.bytes, 2, 5.0, 11).unwrap();
        let b = decode_bytes(&models, &enc.bytes, 2, 5.0, 11).unwrap();
        let c = decode_bytes(&models, &enc.bytes, 2, 5.0, 12).unwrap();
        assert_eq!(max_abs(&a.image, &b.image), 0.0, "same seed must be bit-identical");
        assert!(max_abs(&a.image, &c.image) > 0.0, "different seed must differ");
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let models = tiny_models(6);
        let img = test_image(16, 1);
        assert!(matches!(
            encode_image(&models, &img, &TagSet::empty(), 9).err().unwrap(),
            Error::InvalidArgument { .. }
        ));
        let odd = test_image(24, 1).narrow(1, 0, 20).unwrap();
        assert!(matches!(
            encode_image(&models, &odd, &TagSet::empty(), 0).err().unwrap(),
            Error::NotDivisible { .. }
        ));
        let two_ch = img.narrow(0, 0, 2).unwrap();
        assert!(matches!(
            encode_image(&models, &two_ch, &TagSet::empty(), 0).err().unwrap(),
            Error::Shape { .. }
        ));
    }

    #[test]
    fn decode_rejects_ladder_mismatch() {
        let models = tiny_models(7);
        let img = test_image(16, 1);
        let enc = encode_image(&models, &img, &TagSet::empty(), 4).unwrap();
        let mut short = models;
        short.config.rate_ladder = vec![2.0];
        let err = decode_bytes(&short, &enc.bytes, 2, 1.0, 0).err().unwrap();
        assert!(matches!(err, Error::InvalidArgument { .. }));
    }

    #[test]
    fn larger_images_code_multiple_hyper_columns() {
        let models = tiny_models(8);
        let img = test_image(32, 5);
        let tags = TagSet::new(vec![0, 4]);
        let enc = encode_image(&models, &img, &tags, 3).unwrap();
        let dec = decode_bytes(&models, &enc.bytes, 2, 1.0, 1).unwrap();
        assert_eq!(enc.zh_hat.dims(), &[1, 4, 2, 2]);
        assert_eq!(max_abs(&enc.y_hat, &dec.y_hat), 0.0);
        assert_eq!(dec.image.dims(), &[3, 32, 32]);
    }
}
