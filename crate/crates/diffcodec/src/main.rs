use std::path::PathBuf;

use anyhow::Context;
use candle_core::Device;
use clap::{Parser, Subcommand};

use diffcodec::bitstream::FILE_EXTENSION;
use diffcodec::config::Config;
use diffcodec::image::{format_psnr, load_image, save_image};
use diffcodec::pipeline::codec::{decode_bytes, encode_image, extract_image_tags};
use diffcodec::pipeline::metrics::{analyze_features, eval_folder};
use diffcodec::pipeline::train::run_stage;
use diffcodec::pipeline::Models;

#[derive(Parser)]
#[command(name = "diffcodec", version, about = "Generative image codec with a diffusion decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage and write its checkpoint.
    Train {
        /// Key-value config file.
        #[arg(long)]
        config: PathBuf,
        /// Stage to run: vae, tagger, denoiser, 1 or 2.
        #[arg(long)]
        stage: String,
        /// Overrides the config seed when given.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compress one image to a bitstream.
    Encode {
        /// Input image (.png or .ppm).
        #[arg(short, long)]
        input: PathBuf,
        /// Output bitstream path.
        #[arg(short, long)]
        output: PathBuf,
        /// Rate ladder index, 0 is the highest bitrate.
        #[arg(long, default_value_t = 0)]
        quality: usize,
        /// Trained checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Reconstruct an image from a bitstream.
    Decode {
        /// Input bitstream.
        #[arg(short, long)]
        input: PathBuf,
        /// Output image (.png or .ppm).
        #[arg(short, long)]
        output: PathBuf,
        /// Sampler steps; defaults to the checkpoint config.
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale; defaults to the checkpoint config.
        #[arg(long = "cfg-scale")]
        cfg_scale: Option<f64>,
        /// Sampler seed. The same bitstream and seed always reproduce the
        /// same image.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trained checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Code every image in a folder and write per-image metrics.
    Eval {
        /// Folder of .png or .ppm images.
        #[arg(long)]
        dir: PathBuf,
        /// Trained checkpoint; its stored quality index is used.
        #[arg(long)]
        ckpt: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        csv: PathBuf,
        /// Sampler seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare originals and reconstructions by denoiser feature divergence.
    AnalyzeFeatures {
        /// Folder of original images.
        #[arg(long)]
        orig: PathBuf,
        /// Folder of reconstructions with matching file names.
        #[arg(long)]
        recon: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        csv: PathBuf,
        /// Trained checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let device = Device::Cpu;

    match cli.command {
        Command::Train { config, stage, seed } => {
            let mut cfg = Config::from_file(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let reports = run_stage(&cfg, &stage)?;
            for r in &reports {
                println!(
                    "stage {}: {} iters, loss {:.4} -> {:.4}, saved {}",
                    r.stage,
                    r.iters,
                    r.first_avg,
                    r.last_avg,
                    r.checkpoint.display()
                );
            }
        }
        Command::Encode { input, output, quality, ckpt } => {
            let (models, _, _) = Models::load(&ckpt, &device)?;
            let image = load_image(&input, &device)?;
            let tags = extract_image_tags(&models, &image)?;
            let enc = encode_image(&models, &image, &tags, quality)?;
            if output.extension().and_then(|e| e.to_str()) != Some(FILE_EXTENSION) {
                log::warn!("output does not use the .{FILE_EXTENSION} extension");
            }
            std::fs::write(&output, &enc.bytes)
                .with_context(|| format!("writing {}", output.display()))?;
            let names: Vec<&str> =
                tags.ids().iter().map(|&id| models.dict.tag(id).unwrap_or("?")).collect();
            println!(
                "{}: {} bytes ({:.1} bits estimated), quality {}, tags [{}]",
                output.display(),
                enc.bytes.len(),
                enc.estimate.total_bits(),
                quality,
                names.join(", ")
            );
        }
        Command::Decode { input, output, steps, cfg_scale, seed, ckpt } => {
            let (models, _, _) = Models::load(&ckpt, &device)?;
            let bytes = std::fs::read(&input)
                .with_context(|| format!("reading {}", input.display()))?;
            let steps = steps.unwrap_or(models.config.ddim_steps);
            let cfg_scale = cfg_scale.unwrap_or(models.config.cfg_scale);
            let dec = decode_bytes(&models, &bytes, steps, cfg_scale, seed)?;
            save_image(&dec.image, &output)?;
            println!(
                "{}: {} steps, guidance {}, seed {}",
                output.display(),
                steps,
                cfg_scale,
                seed
            );
        }
        Command::Eval { dir, ckpt, csv, seed } => {
            let (models, _, info) = Models::load(&ckpt, &device)?;
            let quality = info.quality_index.unwrap_or(0);
            let rows = eval_folder(
                &models,
                &dir,
                quality,
                models.config.ddim_steps,
                models.config.cfg_scale,
                seed,
                &csv,
            )?;
            let n = rows.len() as f64;
            let mean_psnr = rows.iter().map(|(_, m)| m.psnr_db).sum::<f64>() / n;
            let mean_bpp = rows.iter().map(|(_, m)| m.bpp).sum::<f64>() / n;
            let mean_mse = rows.iter().map(|(_, m)| m.latent_mse).sum::<f64>() / n;
            println!(
                "{} images: mean psnr {} dB, mean {:.4} bpp, mean latent mse {:.6} -> {}",
                rows.len(),
                format_psnr(mean_psnr),
                mean_bpp,
                mean_mse,
                csv.display()
            );
        }
        Command::AnalyzeFeatures { orig, recon, csv, ckpt } => {
            let (models, _, _) = Models::load(&ckpt, &device)?;
            let rows = analyze_features(&models, &orig, &recon, &csv)?;
            for (site, d) in &rows {
                println!("{site}: {d:.6}");
            }
            println!("wrote {}", csv.display());
        }
    }
    Ok(())
}
