//! Two-level U-Net noise predictor with timestep and tag conditioning.
//!
//! Conditioning is a single embedding vector added to the timestep
//! embedding. The forward pass exposes five named activation sites (two
//! encoder, middle, two decoder); a control branch can add one residual map
//! per site, and feature extraction can capture any site's activation.

use candle_core::{DType, Tensor};
use candle_nn::{Conv2dConfig, GroupNorm, Linear, Module};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};

/// Named activation sites, in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Enc1,
    Enc2,
    Middle,
    Dec2,
    Dec1,
}

/// All sites in forward order; injection residual lists follow this order.
pub const SITES: [Site; 5] = [Site::Enc1, Site::Enc2, Site::Middle, Site::Dec2, Site::Dec1];

impl Site {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "enc1" => Ok(Self::Enc1),
            "enc2" => Ok(Self::Enc2),
            "middle" => Ok(Self::Middle),
            "dec2" => Ok(Self::Dec2),
            "dec1" => Ok(Self::Dec1),
            other => Err(Error::InvalidSite { site: other.to_string() }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Enc1 => "enc1",
            Self::Enc2 => "enc2",
            Self::Middle => "middle",
            Self::Dec2 => "dec2",
            Self::Dec1 => "dec1",
        }
    }
}

fn norm_groups(channels: usize) -> usize {
    for g in [8, 4, 2, 1] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

/// Residual block with timestep-embedding modulation.
pub(crate) struct TimeResBlock {
    gn1: GroupNorm,
    c1: Conv2d,
    emb_proj: Linear,
    gn2: GroupNorm,
    c2: Conv2d,
    skip: Option<Conv2d>,
}

impl TimeResBlock {
    pub(crate) fn new(
        ps: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        emb_dim: usize,
    ) -> Result<Self> {
        let pad1 = Conv2dConfig { padding: 1, ..Default::default() };
        let skip = if in_c != out_c {
            Some(ps.conv2d(&format!("{name}.skip"), in_c, out_c, 1, Conv2dConfig::default())?)
        } else {
            None
        };
        Ok(Self {
            gn1: ps.group_norm(&format!("{name}.gn1"), in_c, norm_groups(in_c))?,
            c1: ps.conv2d(&format!("{name}.c1"), in_c, out_c, 3, pad1)?,
            emb_proj: ps.linear(&format!("{name}.emb"), emb_dim, out_c)?,
            gn2: ps.group_norm(&format!("{name}.gn2"), out_c, norm_groups(out_c))?,
            c2: ps.conv2d(&format!("{name}.c2"), out_c, out_c, 3, pad1)?,
            skip,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(&self.gn1.forward(x)?.silu()?)?;
        let e = self.emb_proj.forward(&emb.silu()?)?;
        let e = e.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&e)?;
        let h = self.c2.forward(&self.gn2.forward(&h)?.silu()?)?;
        let x = match &self.skip {
            Some(skip) => skip.forward(x)?,
            None => x.clone(),
        };
        Ok((x + h)?)
    }
}

pub struct UNet {
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    e1: TimeResBlock,
    down1: Conv2d,
    e2: TimeResBlock,
    mid: TimeResBlock,
    d2: TimeResBlock,
    up1: Conv2d,
    d1: TimeResBlock,
    gn_out: GroupNorm,
    conv_out: Conv2d,
    latent_channels: usize,
    widths: [usize; 2],
    embed_dim: usize,
}

impl UNet {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        latent_channels: usize,
        widths: [usize; 2],
        embed_dim: usize,
    ) -> Result<Self> {
        if embed_dim % 2 != 0 {
            return Err(Error::InvalidArgument {
                what: format!("embedding dim {embed_dim} must be even"),
            });
        }
        let [w0, w1] = widths;
        let pad1 = Conv2dConfig { padding: 1, ..Default::default() };
        let down = Conv2dConfig { padding: 1, stride: 2, ..Default::default() };
        Ok(Self {
            temb1: ps.linear(&format!("{prefix}.temb1"), embed_dim, embed_dim)?,
            temb2: ps.linear(&format!("{prefix}.temb2"), embed_dim, embed_dim)?,
            conv_in: ps.conv2d(&format!("{prefix}.conv_in"), latent_channels, w0, 3, pad1)?,
            e1: TimeResBlock::new(ps, &format!("{prefix}.e1"), w0, w0, embed_dim)?,
            down1: ps.conv2d(&format!("{prefix}.down1"), w0, w1, 3, down)?,
            e2: TimeResBlock::new(ps, &format!("{prefix}.e2"), w1, w1, embed_dim)?,
            mid: TimeResBlock::new(ps, &format!("{prefix}.mid"), w1, w1, embed_dim)?,
            d2: TimeResBlock::new(ps, &format!("{prefix}.d2"), 2 * w1, w1, embed_dim)?,
            up1: ps.conv2d(&format!("{prefix}.up1"), w1, w0, 3, pad1)?,
            d1: TimeResBlock::new(ps, &format!("{prefix}.d1"), 2 * w0, w0, embed_dim)?,
            gn_out: ps.group_norm(&format!("{prefix}.gn_out"), w0, norm_groups(w0))?,
            conv_out: ps.conv2d(&format!("{prefix}.conv_out"), w0, latent_channels, 3, pad1)?,
            latent_channels,
            widths,
            embed_dim,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn widths(&self) -> [usize; 2] {
        self.widths
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    /// Sinusoidal timestep features followed by the embedding MLP, plus the
    /// conditioning vector.
    pub fn embed(&self, t: &[usize], cond: &Tensor, dtype: DType) -> Result<Tensor> {
        let sin = timestep_embedding(t, self.embed_dim, cond.device())?.to_dtype(dtype)?;
        let e = self.temb2.forward(&self.temb1.forward(&sin)?.silu()?)?;
        if cond.dims() != [t.len(), self.embed_dim] {
            return Err(Error::Shape {
                context: "conditioning vector".to_string(),
                expected: format!("({}, {})", t.len(), self.embed_dim),
                got: format!("{:?}", cond.dims()),
            });
        }
        Ok((e + cond)?)
    }

    fn check_input(&self, z_t: &Tensor, t: &[usize]) -> Result<()> {
        let dims = z_t.dims();
        if dims.len() != 4 || dims[1] != self.latent_channels {
            return Err(Error::Shape {
                context: "denoiser input".to_string(),
                expected: format!("(B, {}, h, w)", self.latent_channels),
                got: format!("{dims:?}"),
            });
        }
        if dims[0] != t.len() {
            return Err(Error::Shape {
                context: "timestep batch".to_string(),
                expected: format!("{} timesteps", dims[0]),
                got: format!("{}", t.len()),
            });
        }
        for (what, v) in [("latent height", dims[2]), ("latent width", dims[3])] {
            if v % 2 != 0 {
                return Err(Error::NotDivisible { what: what.to_string(), value: v, by: 2 });
            }
        }
        Ok(())
    }

    /// Full forward pass. `residuals`, when given, are added after each
    /// site's block in [`SITES`] order. `capture` returns the activation at
    /// one site (after injection).
    pub fn forward_with(
        &self,
        z_t: &Tensor,
        t: &[usize],
        cond: &Tensor,
        residuals: Option<&[Tensor]>,
        capture: Option<Site>,
    ) -> Result<(Tensor, Option<Tensor>)> {
        self.check_input(z_t, t)?;
        if let Some(r) = residuals {
            if r.len() != SITES.len() {
                return Err(Error::Shape {
                    context: "control residuals".to_string(),
                    expected: format!("{} maps", SITES.len()),
                    got: format!("{}", r.len()),
                });
            }
        }
        let emb = self.embed(t, cond, z_t.dtype())?;
        let inject = |h: Tensor, site_idx: usize| -> Result<Tensor> {
            match residuals {
                Some(r) => Ok((h + &r[site_idx])?),
                None => Ok(h),
            }
        };
        let mut captured = None;
        let mut grab = |h: &Tensor, site: Site| {
            if capture == Some(site) {
                captured = Some(h.clone());
            }
        };

        let h = self.conv_in.forward(z_t)?;
        let h = inject(self.e1.forward(&h, &emb)?, 0)?;
        grab(&h, Site::Enc1);
        let skip1 = h.clone();
        let h = self.down1.forward(&h)?;
        let h = inject(self.e2.forward(&h, &emb)?, 1)?;
        grab(&h, Site::Enc2);
        let skip2 = h.clone();
        let h = inject(self.mid.forward(&h, &emb)?, 2)?;
        grab(&h, Site::Middle);
        let h = inject(self.d2.forward(&Tensor::cat(&[&h, &skip2], 1)?, &emb)?, 3)?;
        grab(&h, Site::Dec2);
        let h = h.upsample_nearest2d(h.dim(2)? * 2, h.dim(3)? * 2)?;
        let h = self.up1.forward(&h)?;
        let h = inject(self.d1.forward(&Tensor::cat(&[&h, &skip1], 1)?, &emb)?, 4)?;
        grab(&h, Site::Dec1);
        let out = self.conv_out.forward(&self.gn_out.forward(&h)?.silu()?)?;
        Ok((out, captured))
    }

    /// Bare noise prediction without control injection.
    pub fn forward(&self, z_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with(z_t, t, cond, None, None)?.0)
    }

    /// Expected residual shape at each site for the given input size.
    pub fn site_shape(&self, site: Site, batch: usize, h: usize, w: usize) -> [usize; 4] {
        let [w0, w1] = self.widths;
        match site {
            Site::Enc1 | Site::Dec1 => [batch, w0, h, w],
            Site::Enc2 | Site::Middle | Site::Dec2 => [batch, w1, h / 2, w / 2],
        }
    }
}

/// Sinusoidal features of integer timesteps, shape (B, dim), f32.
pub fn timestep_embedding(
    t: &[usize],
    dim: usize,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        let tv = tv as f64;
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            data.push((tv * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            data.push((tv * freq).cos() as f32);
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), device)?)
}
