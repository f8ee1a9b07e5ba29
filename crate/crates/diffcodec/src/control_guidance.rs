//! Control branch conditioning the denoiser on the decoded latent.
//!
//! The branch copies the denoiser's encoder trunk (input conv, both encoder
//! blocks, downsampler, middle block), folds the decoded latent in through a
//! stride-1 entry convolution, and emits one residual map per denoiser site
//! through 1x1 zero-initialized convolutions. Injection is bilateral: the
//! encoder-level features also feed the decoder-side sites.

use candle_core::Tensor;
use candle_nn::{Conv2dConfig, Module};

use crate::diffusion_core::unet::TimeResBlock;
use crate::diffusion_core::{EpsModel, Site, UNet, SITES};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};

/// Trunk components mirrored from the denoiser, by dotted-name suffix.
const TRUNK_PARTS: [&str; 5] = ["conv_in", "e1", "down1", "e2", "mid"];

pub struct ControlBranch {
    entry: Conv2d,
    conv_in: Conv2d,
    e1: TimeResBlock,
    down1: Conv2d,
    e2: TimeResBlock,
    mid: TimeResBlock,
    zc: [Conv2d; 5],
    latent_channels: usize,
}

impl ControlBranch {
    /// Registers the branch parameters. Trunk layers start at their own
    /// random init; call [`ControlBranch::copy_trunk_from`] afterwards to
    /// mirror the denoiser. Zero convolutions start at exactly zero.
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        latent_channels: usize,
        widths: [usize; 2],
        embed_dim: usize,
    ) -> Result<Self> {
        let [w0, w1] = widths;
        let pad1 = Conv2dConfig { padding: 1, ..Default::default() };
        let down = Conv2dConfig { padding: 1, stride: 2, ..Default::default() };
        let t = |part: &str| format!("{prefix}.trunk.{part}");
        let zc_channels = [w0, w1, w1, w1, w0];
        let mut zc = Vec::with_capacity(5);
        for (i, c) in zc_channels.iter().enumerate() {
            zc.push(ps.conv2d_zero(
                &format!("{prefix}.zc{}", i + 1),
                *c,
                *c,
                1,
                Conv2dConfig::default(),
            )?);
        }
        let zc: [Conv2d; 5] = zc.try_into().map_err(|_| Error::InvalidArgument {
            what: "zero conv count".to_string(),
        })?;
        Ok(Self {
            entry: ps.conv2d(&format!("{prefix}.entry"), latent_channels, w0, 3, pad1)?,
            conv_in: ps.conv2d(&t("conv_in"), latent_channels, w0, 3, pad1)?,
            e1: TimeResBlock::new(ps, &t("e1"), w0, w0, embed_dim)?,
            down1: ps.conv2d(&t("down1"), w0, w1, 3, down)?,
            e2: TimeResBlock::new(ps, &t("e2"), w1, w1, embed_dim)?,
            mid: TimeResBlock::new(ps, &t("mid"), w1, w1, embed_dim)?,
            zc,
            latent_channels,
        })
    }

    /// Overwrites the trunk with the denoiser's current encoder parameters,
    /// bit-exact. Entry conv and zero convs are untouched.
    pub fn copy_trunk_from(
        ps: &mut ParamStore,
        denoiser_prefix: &str,
        branch_prefix: &str,
    ) -> Result<usize> {
        let mut copied = 0;
        for part in TRUNK_PARTS {
            copied += ps.copy_prefix(
                &format!("{denoiser_prefix}.{part}."),
                &format!("{branch_prefix}.trunk.{part}."),
            )?;
        }
        Ok(copied)
    }

    /// One residual map per denoiser site, in [`SITES`] order. The decoded
    /// latent must match the noisy latent's resolution exactly.
    pub fn forward(
        &self,
        denoiser: &UNet,
        z_hat: &Tensor,
        z_t: &Tensor,
        t: &[usize],
        cond: &Tensor,
    ) -> Result<Vec<Tensor>> {
        if z_hat.dims() != z_t.dims() {
            return Err(Error::Shape {
                context: "control condition".to_string(),
                expected: format!("{:?}", z_t.dims()),
                got: format!("{:?}", z_hat.dims()),
            });
        }
        if z_hat.dims().len() != 4 || z_hat.dims()[1] != self.latent_channels {
            return Err(Error::Shape {
                context: "control condition channels".to_string(),
                expected: format!("(B, {}, h, w)", self.latent_channels),
                got: format!("{:?}", z_hat.dims()),
            });
        }
        let emb = denoiser.embed(t, cond, z_t.dtype())?;
        let h = (self.conv_in.forward(z_t)? + self.entry.forward(z_hat)?)?;
        let f_e1 = self.e1.forward(&h, &emb)?;
        let f_e2 = self.e2.forward(&self.down1.forward(&f_e1)?, &emb)?;
        let f_m = self.mid.forward(&f_e2, &emb)?;
        let sources = [&f_e1, &f_e2, &f_m, &f_m, &f_e1];
        let mut residuals = Vec::with_capacity(SITES.len());
        for (conv, src) in self.zc.iter().zip(sources.iter()) {
            residuals.push(conv.forward(src)?);
        }
        Ok(residuals)
    }
}

/// Noise prediction with control injection at every site.
pub fn predict_eps(
    denoiser: &UNet,
    branch: &ControlBranch,
    z_t: &Tensor,
    z_hat: &Tensor,
    cond: &Tensor,
    t: &[usize],
) -> Result<Tensor> {
    let residuals = branch.forward(denoiser, z_hat, z_t, t, cond)?;
    Ok(denoiser.forward_with(z_t, t, cond, Some(&residuals), None)?.0)
}

/// Noise prediction with control injection, also capturing one site's
/// activation from the injected pass.
pub fn predict_eps_capturing(
    denoiser: &UNet,
    branch: &ControlBranch,
    z_t: &Tensor,
    z_hat: &Tensor,
    cond: &Tensor,
    t: &[usize],
    capture: Site,
) -> Result<(Tensor, Tensor)> {
    let residuals = branch.forward(denoiser, z_hat, z_t, t, cond)?;
    let (eps, cap) = denoiser.forward_with(z_t, t, cond, Some(&residuals), Some(capture))?;
    let cap = cap.ok_or_else(|| Error::InvalidSite { site: capture.name().to_string() })?;
    Ok((eps, cap))
}

/// Denoiser plus control branch bound to a fixed decoded latent, usable
/// wherever a bare noise predictor is expected (sampling in particular).
pub struct ControlledModel<'a> {
    pub denoiser: &'a UNet,
    pub branch: &'a ControlBranch,
    pub z_hat: Tensor,
}

impl EpsModel for ControlledModel<'_> {
    fn predict(&self, z_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        predict_eps(self.denoiser, self.branch, z_t, &self.z_hat, cond, t)
    }
}
