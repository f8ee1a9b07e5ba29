//! Folder-level evaluation and feature-divergence reporting.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::image::{format_psnr, load_image, mse, psnr};
use crate::pipeline::codec::{decode_bytes, encode_image, extract_image_tags};
use crate::pipeline::Models;
use crate::semantics::feature_divergence_profile;
use crate::diffusion_core::SITES;

/// Per-image evaluation record.
#[derive(Debug, Clone)]
pub struct ImageMetrics {
    pub psnr_db: f64,
    pub bpp: f64,
    pub latent_mse: f64,
    pub encode_s: f64,
    pub decode_s: f64,
}

/// Lists the images a folder command operates on, in stable name order.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::InvalidArgument {
            what: format!("cannot read folder {}: {e}", dir.display()),
        })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref e) if e == "png" || e == "ppm"
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Codes one image end to end and measures quality, rate and wall time.
pub fn evaluate_image(
    models: &Models,
    image: &Tensor,
    quality: usize,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
) -> Result<ImageMetrics> {
    let start = Instant::now();
    let tags = extract_image_tags(models, image)?;
    let enc = encode_image(models, image, &tags, quality)?;
    let encode_s = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let dec = decode_bytes(models, &enc.bytes, steps, cfg_scale, seed)?;
    let decode_s = start.elapsed().as_secs_f64();

    let (h, w) = (image.dim(1)?, image.dim(2)?);
    let z = (models.vae.encode(&image.unsqueeze(0)?)?.detach() * models.latent_scale)?;
    Ok(ImageMetrics {
        psnr_db: psnr(image, &dec.image)?,
        bpp: 8.0 * enc.bytes.len() as f64 / (h * w) as f64,
        latent_mse: mse(&z, &dec.z_hat)?,
        encode_s,
        decode_s,
    })
}

/// Evaluates every PNG or PPM in a folder and writes a CSV with one row per
/// image. Returns the records in file order.
pub fn eval_folder(
    models: &Models,
    dir: &Path,
    quality: usize,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
    csv_out: &Path,
) -> Result<Vec<(String, ImageMetrics)>> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument {
            what: format!("no .png or .ppm images in {}", dir.display()),
        });
    }
    let mut rows = Vec::with_capacity(files.len());
    let mut csv = String::from("file,psnr_db,bpp,latent_mse,encode_s,decode_s\n");
    for path in files {
        let image = load_image(&path, &models.device)?;
        let m = evaluate_image(models, &image, quality, steps, cfg_scale, seed)?;
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("?")
            .to_string();
        log::info!(
            "{name}: psnr {} dB, {:.4} bpp, latent mse {:.6}",
            format_psnr(m.psnr_db),
            m.bpp,
            m.latent_mse
        );
        csv.push_str(&format!(
            "{name},{},{:.6},{:.8},{:.3},{:.3}\n",
            format_psnr(m.psnr_db),
            m.bpp,
            m.latent_mse,
            m.encode_s,
            m.decode_s
        ));
        rows.push((name, m));
    }
    fs::write(csv_out, csv).map_err(|e| Error::InvalidArgument {
        what: format!("cannot write {}: {e}", csv_out.display()),
    })?;
    Ok(rows)
}

/// Compares originals with reconstructions by the denoiser features their
/// latents produce, averaged per network site over all shared filenames.
/// Writes a two-column CSV and returns (site name, mean divergence) rows.
pub fn analyze_features(
    models: &Models,
    orig_dir: &Path,
    recon_dir: &Path,
    csv_out: &Path,
) -> Result<Vec<(String, f64)>> {
    let recon_names: std::collections::BTreeSet<String> = list_images(recon_dir)?
        .into_iter()
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_string))
        .collect();
    let shared: Vec<PathBuf> = list_images(orig_dir)?
        .into_iter()
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| recon_names.contains(n))
        })
        .collect();
    if shared.is_empty() {
        return Err(Error::InvalidArgument {
            what: format!(
                "no shared image names between {} and {}",
                orig_dir.display(),
                recon_dir.display()
            ),
        });
    }

    let mut sums = vec![0.0f64; SITES.len()];
    let mut count = 0usize;
    for orig_path in &shared {
        let name = orig_path.file_name().expect("filtered on file names");
        let orig = load_image(orig_path, &models.device)?;
        let recon = load_image(&recon_dir.join(name), &models.device)?;
        if orig.dims() != recon.dims() {
            return Err(Error::Shape {
                context: format!("feature analysis of {}", name.to_string_lossy()),
                expected: format!("{:?}", orig.dims()),
                got: format!("{:?}", recon.dims()),
            });
        }
        // The denoiser halves spatial dims once internally, so latents must
        // have even height and width.
        let f = 2 * models.config.vae_downsampling;
        for v in [orig.dim(1)?, orig.dim(2)?] {
            if v % f != 0 {
                return Err(Error::NotDivisible {
                    what: format!("analysis image side for {}", name.to_string_lossy()),
                    value: v,
                    by: f,
                });
            }
        }
        let z_o = (models.vae.encode(&orig.unsqueeze(0)?)?.detach() * models.latent_scale)?;
        let z_r = (models.vae.encode(&recon.unsqueeze(0)?)?.detach() * models.latent_scale)?;
        let cond = models.conditioner.null_condition(1, &models.device)?;
        let profile = feature_divergence_profile(&models.denoiser, &z_o, &z_r, &cond)?;
        for (i, (_, d)) in profile.iter().enumerate() {
            sums[i] += d;
        }
        count += 1;
    }

    let mut csv = String::from("layer_id,divergence\n");
    let mut rows = Vec::with_capacity(SITES.len());
    for (i, site) in SITES.iter().enumerate() {
        let mean = sums[i] / count as f64;
        csv.push_str(&format!("{},{:.8}\n", site.name(), mean));
        rows.push((site.name().to_string(), mean));
    }
    fs::write(csv_out, csv).map_err(|e| Error::InvalidArgument {
        what: format!("cannot write {}: {e}", csv_out.display()),
    })?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::dataset::{builtin_dictionary, SyntheticSampler};
    use crate::image::save_image;
    use crate::nn::ParamStore;
    use candle_core::Device;

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
        let mut ps = ParamStore::new(seed, Device::Cpu);
        Models::build(&mut ps, &cfg, builtin_dictionary(), 1.0).unwrap()
    }

    fn write_samples(dir: &Path, count: usize, seed: u64) {
        let mut sampler = SyntheticSampler::new(16, seed, Device::Cpu).unwrap();
        for i in 0..count {
            let s = sampler.sample().unwrap();
            save_image(&s.image, &dir.join(format!("img{i}.png"))).unwrap();
        }
    }

    #[test]
    fn evaluate_image_reports_consistent_rate() {
        let models = tiny_models(2);
        let img = SyntheticSampler::new(16, 1, Device::Cpu).unwrap().sample().unwrap().image;
        let m = evaluate_image(&models, &img, 0, 2, 1.0, 0).unwrap();
        assert!(m.bpp > 0.0);
        assert!(m.latent_mse >= 0.0);
        assert!(m.encode_s > 0.0 && m.decode_s > 0.0);
        let tags = extract_image_tags(&models, &img).unwrap();
        let enc = encode_image(&models, &img, &tags, 0).unwrap();
        let expect = 8.0 * enc.bytes.len() as f64 / 256.0;
        assert!((m.bpp - expect).abs() < 1e-12, "bpp {} vs {}", m.bpp, expect);
    }

    #[test]
    fn eval_folder_writes_one_row_per_image() {
        let models = tiny_models(3);
        let dir = tempfile::tempdir().unwrap();
        write_samples(dir.path(), 3, 5);
        let csv_path = dir.path().join("eval.csv");
        let rows = eval_folder(&models, dir.path(), 1, 2, 1.0, 0, &csv_path).unwrap();
        assert_eq!(rows.len(), 3);
        let csv = fs::read_to_string(&csv_path).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "file,psnr_db,bpp,latent_mse,encode_s,decode_s");
        assert!(lines[1].starts_with("img0.png,"));
    }

    #[test]
    fn eval_folder_rejects_empty_dir() {
        let models = tiny_models(3);
        let dir = tempfile::tempdir().unwrap();
        let err = eval_folder(&models, dir.path(), 0, 2, 1.0, 0, &dir.path().join("x.csv"));
        assert!(matches!(err.unwrap_err(), Error::InvalidArgument { .. }));
    }

    #[test]
    fn identical_folders_have_near_zero_divergence() {
        let models = tiny_models(4);
        let dir = tempfile::tempdir().unwrap();
        write_samples(dir.path(), 2, 9);
        let csv_path = dir.path().join("features.csv");
        let rows = analyze_features(&models, dir.path(), dir.path(), &csv_path).unwrap();
        assert_eq!(rows.len(), SITES.len());
        for (site, d) in &rows {
            assert!(*d < 1e-5, "site {site} diverged by {d} on identical inputs");
        }
        let csv = fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv.lines().count(), SITES.len() + 1);
        assert_eq!(csv.lines().next().unwrap(), "layer_id,divergence");
    }

    #[test]
    fn disjoint_folders_are_rejected() {
        let models = tiny_models(4);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_samples(a.path(), 1, 1);
        let mut sampler = SyntheticSampler::new(16, 2, Device::Cpu).unwrap();
        save_image(&sampler.sample().unwrap().image, &b.path().join("other.png")).unwrap();
        let err = analyze_features(&models, a.path(), b.path(), &a.path().join("x.csv"));
        assert!(matches!(err.unwrap_err(), Error::InvalidArgument { .. }));
    }
}
