//! Small variational autoencoder defining the coding latent space.
//!
//! The encoder downsamples by a power-of-two factor `f` into `C_z` channels
//! and parameterizes a diagonal Gaussian posterior; codec-side encoding is
//! deterministic and uses the posterior mean. The decoder mirrors the
//! encoder with nearest-neighbor upsampling.

use candle_core::Tensor;
use candle_nn::{AdamW, Conv2dConfig, Module, Optimizer};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::{randn, Conv2d, ParamStore};

struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let pad1 = Conv2dConfig { padding: 1, ..Default::default() };
        Ok(Self {
            c1: ps.conv2d(&format!("{name}.c1"), channels, channels, 3, pad1)?,
            c2: ps.conv2d(&format!("{name}.c2"), channels, channels, 3, pad1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(x)?.silu()?;
        Ok((x + self.c2.forward(&h)?)?)
    }
}

pub struct Vae {
    e_in: Conv2d,
    e_down: Vec<Conv2d>,
    e_res: ResBlock,
    e_out: Conv2d,
    d_in: Conv2d,
    d_res: ResBlock,
    d_up: Vec<Conv2d>,
    d_out: Conv2d,
    f: usize,
    c_z: usize,
}

impl Vae {
    pub fn new(ps: &mut ParamStore, prefix: &str, f: usize, c_z: usize, width: usize) -> Result<Self> {
        if !f.is_power_of_two() || f == 0 {
            return Err(Error::InvalidArgument {
                what: format!("vae downsampling {f} must be a positive power of two"),
            });
        }
        let pad1 = Conv2dConfig { padding: 1, ..Default::default() };
        let down = Conv2dConfig { padding: 1, stride: 2, ..Default::default() };
        let stages = f.trailing_zeros() as usize;
        let mut e_down = Vec::new();
        let mut d_up = Vec::new();
        for i in 0..stages {
            e_down.push(ps.conv2d(&format!("{prefix}.e_down{i}"), width, width, 3, down)?);
            d_up.push(ps.conv2d(&format!("{prefix}.d_up{i}"), width, width, 3, pad1)?);
        }
        Ok(Self {
            e_in: ps.conv2d(&format!("{prefix}.e_in"), 3, width, 3, pad1)?,
            e_down,
            e_res: ResBlock::new(ps, &format!("{prefix}.e_res"), width)?,
            e_out: ps.conv2d(&format!("{prefix}.e_out"), width, 2 * c_z, 3, pad1)?,
            d_in: ps.conv2d(&format!("{prefix}.d_in"), c_z, width, 3, pad1)?,
            d_res: ResBlock::new(ps, &format!("{prefix}.d_res"), width)?,
            d_up,
            d_out: ps.conv2d(&format!("{prefix}.d_out"), width, 3, 3, pad1)?,
            f,
            c_z,
        })
    }

    pub fn downsampling(&self) -> usize {
        self.f
    }

    pub fn latent_channels(&self) -> usize {
        self.c_z
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::Shape {
                context: "vae image input".to_string(),
                expected: "(B, 3, H, W)".to_string(),
                got: format!("{dims:?}"),
            });
        }
        for (what, v) in [("image height", dims[2]), ("image width", dims[3])] {
            if v % self.f != 0 {
                return Err(Error::NotDivisible { what: what.to_string(), value: v, by: self.f });
            }
        }
        Ok(())
    }

    /// Posterior parameters (mu, logvar), each (B, C_z, H/f, W/f).
    pub fn posterior(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_image(x)?;
        let mut h = self.e_in.forward(x)?.silu()?;
        for conv in &self.e_down {
            h = conv.forward(&h)?.silu()?;
        }
        let h = self.e_res.forward(&h)?;
        let out = self.e_out.forward(&h)?;
        let mu = out.narrow(1, 0, self.c_z)?.contiguous()?;
        let logvar = out.narrow(1, self.c_z, self.c_z)?.contiguous()?;
        Ok((mu, logvar))
    }

    /// Deterministic codec-side encoding: the posterior mean.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.posterior(x)?.0)
    }

    /// Decoder output before range clamping; used by the training loss.
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let dims = z.dims();
        if dims.len() != 4 || dims[1] != self.c_z {
            return Err(Error::Shape {
                context: "vae latent input".to_string(),
                expected: format!("(B, {}, h, w)", self.c_z),
                got: format!("{dims:?}"),
            });
        }
        let mut h = self.d_in.forward(z)?.silu()?;
        h = self.d_res.forward(&h)?;
        for conv in &self.d_up {
            h = h.upsample_nearest2d(h.dim(2)? * 2, h.dim(3)? * 2)?;
            h = conv.forward(&h)?.silu()?;
        }
        Ok(self.d_out.forward(&h)?)
    }

    /// (B, C_z, h, w) -> (B, 3, h*f, w*f), clamped to [0, 1].
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.decode_raw(z)?.clamp(0f64, 1f64)?)
    }

    /// ELBO-style training loss: elementwise L2 reconstruction plus a
    /// KL-to-standard-normal term scaled by `kl_weight`. Returns
    /// (total, reconstruction, kl); kl_weight = 0 contributes exactly zero.
    pub fn training_loss(
        &self,
        x: &Tensor,
        kl_weight: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<(Tensor, f64, f64)> {
        let (mu, logvar) = self.posterior(x)?;
        let eps = randn(rng, mu.dims(), mu.device())?.to_dtype(mu.dtype())?;
        let z = (&mu + ((logvar.clone() * 0.5)?.exp()? * eps)?)?;
        let recon = self.decode_raw(&z)?;
        let rec_loss = (recon - x)?.sqr()?.mean_all()?;
        // KL(N(mu, var) || N(0, 1)) per element.
        let kl = ((mu.sqr()? + logvar.exp()?)? - (logvar + 1.0)?)?
            .mean_all()?
            .affine(0.5, 0.0)?;
        let kl_val = crate::nn::scalar(&kl)?;
        let rec_val = crate::nn::scalar(&rec_loss)?;
        let total = if kl_weight == 0.0 {
            rec_loss
        } else {
            (rec_loss + (kl * kl_weight)?)?
        };
        Ok((total, rec_val, kl_val))
    }
}

/// One optimizer step on the VAE; returns (total, recon, kl) loss values.
pub fn train_step(
    vae: &Vae,
    opt: &mut AdamW,
    batch: &Tensor,
    kl_weight: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, f64, f64)> {
    if batch.dim(0)? == 0 {
        return Err(Error::InvalidArgument { what: "empty batch".to_string() });
    }
    let (loss, rec, kl) = vae.training_loss(batch, kl_weight, rng)?;
    let total = crate::nn::scalar(&loss)?;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { component: "vae total".to_string() });
    }
    opt.backward_step(&loss)?;
    Ok((total, rec, kl))
}
