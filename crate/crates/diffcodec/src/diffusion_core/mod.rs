//! Noise schedule, forward noising, denoiser loss, deterministic sampler
//! and guidance mixing.

pub mod unet;

pub use unet::{Site, UNet, SITES};

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::randn;

/// Anything that predicts noise from (z_t, t, conditioning).
pub trait EpsModel {
    fn predict(&self, z_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor>;
}

impl EpsModel for UNet {
    fn predict(&self, z_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        self.forward(z_t, t, cond)
    }
}

/// DDPM-style schedule over timesteps 0..=T with the convention that t = 0
/// carries no noise (cumulative alpha 1).
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Scaled-linear betas: a linear ramp between the square roots of the
    /// endpoints, squared. `t_steps` must be at least 1.
    pub fn scaled_linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps < 1 {
            return Err(Error::InvalidArgument {
                what: format!("schedule needs at least 1 step, got {t_steps}"),
            });
        }
        if !(0.0 < beta_start && beta_start < 1.0 && 0.0 < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument {
                what: "beta endpoints must lie in (0, 1)".to_string(),
            });
        }
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let betas: Vec<f64> = (0..t_steps)
            .map(|i| {
                let u = if t_steps == 1 { 0.0 } else { i as f64 / (t_steps - 1) as f64 };
                let s = s0 + u * (s1 - s0);
                s * s
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t_steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn t_steps(&self) -> usize {
        self.betas.len()
    }

    /// beta for step t, 1-based: valid t in 1..=T.
    pub fn beta(&self, t: usize) -> Result<f64> {
        if t < 1 || t > self.t_steps() {
            return Err(Error::TimestepOutOfRange { t, steps: self.t_steps() });
        }
        Ok(self.betas[t - 1])
    }

    /// Cumulative product of (1 - beta) up to and including step t; valid t
    /// in 0..=T with alpha_bar(0) = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, steps: self.t_steps() })
    }
}

/// z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps, one timestep per batch
/// element.
pub fn add_noise(
    z0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::Shape {
            context: "add_noise".to_string(),
            expected: format!("{:?}", z0.dims()),
            got: format!("{:?}", eps.dims()),
        });
    }
    let b = z0.dim(0)?;
    if t.len() != b {
        return Err(Error::Shape {
            context: "add_noise timesteps".to_string(),
            expected: format!("{b}"),
            got: format!("{}", t.len()),
        });
    }
    let mut sa = Vec::with_capacity(b);
    let mut sb = Vec::with_capacity(b);
    for &tv in t {
        let abar = sched.alpha_bar(tv)?;
        sa.push(abar.sqrt());
        sb.push((1.0 - abar).sqrt());
    }
    // Scales are built at full precision first so f64 inputs stay exact.
    let shape = vec![b, 1, 1, 1];
    let sa = Tensor::from_vec(sa, shape.as_slice(), z0.device())?.to_dtype(z0.dtype())?;
    let sb = Tensor::from_vec(sb, shape.as_slice(), z0.device())?.to_dtype(z0.dtype())?;
    Ok((z0.broadcast_mul(&sa)? + eps.broadcast_mul(&sb)?)?)
}

/// Denoising objective on explicit draws: mean squared error between the
/// sampled noise and the model prediction.
pub fn diffusion_loss_with<M: EpsModel>(
    model: &M,
    z0: &Tensor,
    cond: &Tensor,
    sched: &NoiseSchedule,
    t: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    let z_t = add_noise(z0, t, eps, sched)?;
    let pred = model.predict(&z_t, t, cond)?;
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

/// Denoising objective with internal draws: t ~ Uniform{1..T} per element,
/// eps ~ N(0, I).
pub fn diffusion_loss<M: EpsModel>(
    model: &M,
    z0: &Tensor,
    cond: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor> {
    let b = z0.dim(0)?;
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.t_steps())).collect();
    let eps = randn(rng, z0.dims(), z0.device())?.to_dtype(z0.dtype())?;
    diffusion_loss_with(model, z0, cond, sched, &t, &eps)
}

/// One deterministic sampler step from t to t_prev (t > t_prev):
/// x0_hat = (z_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t), then re-noise to
/// t_prev with the same eps.
pub fn ddim_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t <= t_prev {
        return Err(Error::InvalidArgument {
            what: format!("sampler step requires t > t_prev, got {t} -> {t_prev}"),
        });
    }
    if z_t.dims() != eps_hat.dims() {
        return Err(Error::Shape {
            context: "sampler step".to_string(),
            expected: format!("{:?}", z_t.dims()),
            got: format!("{:?}", eps_hat.dims()),
        });
    }
    let abar_t = sched.alpha_bar(t)?;
    let abar_p = sched.alpha_bar(t_prev)?;
    let x0 = ((z_t - (eps_hat * (1.0 - abar_t).sqrt())?)? / abar_t.sqrt())?;
    Ok(((x0 * abar_p.sqrt())? + (eps_hat * (1.0 - abar_p).sqrt())?)?)
}

/// Guidance mix: eps_uncond + scale * (eps_cond - eps_uncond). Scale 1
/// returns the conditional prediction bit-exactly.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if eps_cond.dims() != eps_uncond.dims() {
        return Err(Error::Shape {
            context: "guidance mix".to_string(),
            expected: format!("{:?}", eps_cond.dims()),
            got: format!("{:?}", eps_uncond.dims()),
        });
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    Ok((eps_uncond + ((eps_cond - eps_uncond)? * scale)?)?)
}

/// Uniform-stride decreasing timestep sequence from T to 0 with at most
/// `steps` sampler steps.
pub fn sample_timesteps(t_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 {
        return Err(Error::InvalidArgument { what: "sampler needs at least 1 step".to_string() });
    }
    let mut ts: Vec<usize> = (0..=steps).map(|k| t_steps * (steps - k) / steps).collect();
    ts.dedup();
    Ok(ts)
}

/// Full sampler: starts from pure Gaussian noise and runs the uniform-stride
/// step sequence, mixing conditional and unconditional predictions when the
/// guidance scale is not 1 (and skipping the unconditional pass when it is).
#[allow(clippy::too_many_arguments)]
pub fn sample<M: EpsModel>(
    model: &M,
    cond: &Tensor,
    uncond: &Tensor,
    sched: &NoiseSchedule,
    steps: usize,
    cfg_scale: f64,
    shape: &[usize],
    rng: &mut ChaCha12Rng,
) -> Result<Tensor> {
    let ts = sample_timesteps(sched.t_steps(), steps)?;
    let device = cond.device();
    let mut z = randn(rng, shape, device)?;
    let b = shape[0];
    for w in ts.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let tvec = vec![t; b];
        let eps_c = model.predict(&z, &tvec, cond)?;
        let eps = if cfg_scale == 1.0 {
            eps_c
        } else {
            let eps_u = model.predict(&z, &tvec, uncond)?;
            cfg_combine(&eps_c, &eps_u, cfg_scale)?
        };
        z = ddim_step(&z, &eps, t, t_prev, sched)?;
    }
    Ok(z)
}
