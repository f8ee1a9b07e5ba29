//! Rate models and real bit production for the code tensors.
//!
//! The main code tensor is modeled by a conditional Gaussian whose mean and
//! scale come from the hyper path; the hyper-latent itself is modeled by a
//! learned per-channel factorized prior. Both models serve two duties:
//! differentiable bit estimates during training and integer CDF tables for
//! the range coder at encode/decode time.

pub mod factorized;
pub mod range_coder;

pub use factorized::FactorizedPrior;
pub use range_coder::{normal_cdf, CdfTable, RangeDecoder, RangeEncoder, PROB_BITS, PROB_TOTAL};

use candle_core::Tensor;
use candle_nn::{Conv2dConfig, Module};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Lower clamp for Gaussian scales.
pub const SIGMA_MIN: f64 = 0.11;
/// Per-element likelihood floor applied before taking logs.
pub const LIKELIHOOD_FLOOR: f64 = 5.960_464_477_539_063e-8; // 2^-24
/// Inclusive symbol support for coded values.
pub const SUPPORT_MIN: i32 = -255;
pub const SUPPORT_MAX: i32 = 255;

/// Numerically stable softplus on tensors.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.maximum(0f64)?;
    let small = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + small)?)
}

/// Per-element probability that a value rounds into its unit bin under a
/// Gaussian: Phi((v - mu + 0.5)/sigma) - Phi((v - mu - 0.5)/sigma), with the
/// scale clamped to [`SIGMA_MIN`] and the result floored at 2^-24.
/// Differentiable in all three inputs.
pub fn gaussian_likelihood(v: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    if v.dims() != mu.dims() || v.dims() != sigma.dims() {
        return Err(Error::Shape {
            context: "gaussian likelihood".to_string(),
            expected: format!("{:?}", v.dims()),
            got: format!("mu {:?}, sigma {:?}", mu.dims(), sigma.dims()),
        });
    }
    let sigma = sigma.maximum(SIGMA_MIN)?;
    let centered = (v - mu)?;
    let upper = phi(&((&centered + 0.5)?.div(&sigma)?))?;
    let lower = phi(&((&centered - 0.5)?.div(&sigma)?))?;
    Ok((upper - lower)?.maximum(LIKELIHOOD_FLOOR)?)
}

/// Total bits for a tensor under the conditional Gaussian model.
pub fn rate_gaussian_bits(v: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    let p = gaussian_likelihood(v, mu, sigma)?;
    let ln2 = std::f64::consts::LN_2;
    Ok((p.log()?.sum_all()? * (-1.0 / ln2))?)
}

/// Standard normal CDF on tensors.
fn phi(x: &Tensor) -> Result<Tensor> {
    let scaled = (x / std::f64::consts::SQRT_2)?;
    Ok(((scaled.erf()? + 1.0)? * 0.5)?)
}

/// Estimated bits split by bitstream section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEstimate {
    pub main_bits: f64,
    pub hyper_bits: f64,
}

impl RateEstimate {
    pub fn total_bits(&self) -> f64 {
        self.main_bits + self.hyper_bits
    }
}

/// Hyper analysis/synthesis transforms: the code tensor is summarized into a
/// 2x-downsampled hyper code, which is decoded back into per-element mean
/// and scale for the main code's Gaussian model.
pub struct HyperCoder {
    ha1: crate::nn::Conv2d,
    ha2: crate::nn::Conv2d,
    hs1: crate::nn::Conv2d,
    hs2: crate::nn::Conv2d,
    m: usize,
    n_h: usize,
}

impl HyperCoder {
    pub fn new(ps: &mut ParamStore, prefix: &str, m: usize, n_h: usize) -> Result<Self> {
        let pad1 = Conv2dConfig { padding: 1, ..Default::default() };
        let down = Conv2dConfig { padding: 1, stride: 2, ..Default::default() };
        Ok(Self {
            ha1: ps.conv2d(&format!("{prefix}.ha1"), m, n_h, 3, pad1)?,
            ha2: ps.conv2d(&format!("{prefix}.ha2"), n_h, n_h, 3, down)?,
            hs1: ps.conv2d(&format!("{prefix}.hs1"), n_h, m, 3, pad1)?,
            hs2: ps.conv2d(&format!("{prefix}.hs2"), m, 2 * m, 3, pad1)?,
            m,
            n_h,
        })
    }

    pub fn hyper_channels(&self) -> usize {
        self.n_h
    }

    /// (B, M, h, w) -> (B, N_h, ceil(h/2), ceil(w/2)), unquantized.
    pub fn analysis(&self, y: &Tensor) -> Result<Tensor> {
        if y.dims().len() != 4 || y.dim(1)? != self.m {
            return Err(Error::Shape {
                context: "hyper analysis".to_string(),
                expected: format!("(B, {}, h, w)", self.m),
                got: format!("{:?}", y.dims()),
            });
        }
        let h = self.ha1.forward(y)?.silu()?;
        Ok(self.ha2.forward(&h)?)
    }

    /// Decodes a quantized hyper code into (mu, sigma), each shaped like the
    /// main code tensor (B, M, h, w). `target_hw` crops the 2x upsampling
    /// back to odd sizes when needed. Scales satisfy sigma >= SIGMA_MIN.
    pub fn synthesis(&self, zh: &Tensor, target_hw: (usize, usize)) -> Result<(Tensor, Tensor)> {
        if zh.dims().len() != 4 || zh.dim(1)? != self.n_h {
            return Err(Error::Shape {
                context: "hyper synthesis".to_string(),
                expected: format!("(B, {}, h, w)", self.n_h),
                got: format!("{:?}", zh.dims()),
            });
        }
        let (th, tw) = target_hw;
        let (hh, ww) = (zh.dim(2)?, zh.dim(3)?);
        if 2 * hh < th || 2 * ww < tw {
            return Err(Error::Shape {
                context: "hyper synthesis target".to_string(),
                expected: format!("target at most ({}, {})", 2 * hh, 2 * ww),
                got: format!("({th}, {tw})"),
            });
        }
        let up = zh.upsample_nearest2d(2 * hh, 2 * ww)?;
        let h = self.hs1.forward(&up)?.silu()?;
        let h = self.hs2.forward(&h)?;
        let h = h.narrow(2, 0, th)?.narrow(3, 0, tw)?;
        let mu = h.narrow(1, 0, self.m)?;
        let sigma_raw = h.narrow(1, self.m, self.m)?;
        let sigma = softplus(&sigma_raw)?.maximum(SIGMA_MIN)?;
        Ok((mu.contiguous()?, sigma.contiguous()?))
    }
}
