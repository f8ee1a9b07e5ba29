//! Analysis and synthesis transforms between the VAE latent space and the
//! coded tensor, plus the quantizer with its training surrogates.
//!
//! The analysis transform downsamples once by `s = 2`; the synthesis mirror
//! upsamples once. A pixel-resolution synthesis head exists as a separate
//! decoder for the pixel-space-distortion training variant.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use candle_nn::{Conv2dConfig, Module};
use rand_chacha::ChaCha12Rng;

use crate::config::AnalysisInput;
use crate::error::{Error, Result};
use crate::nn::{rand_uniform, Conv2d, ParamStore};

/// Quantization modes. `Noise` and `Ste` are training surrogates; real
/// coding always uses `Round`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerMode {
    /// Adds elementwise uniform noise on [-0.5, 0.5).
    Noise,
    /// Round to nearest, ties away from zero.
    Round,
    /// Forward equals `Round` bit-exactly, gradient is the identity.
    Ste,
}

impl std::fmt::Display for QuantizerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Noise => write!(f, "NOISE"),
            Self::Round => write!(f, "ROUND"),
            Self::Ste => write!(f, "STE"),
        }
    }
}

/// Applies the quantizer. `training` gates the surrogate modes; requesting
/// `Noise` or `Ste` outside training is an error, as is `Noise` without an
/// rng.
pub fn quantize(
    y: &Tensor,
    mode: QuantizerMode,
    training: bool,
    rng: Option<&mut ChaCha12Rng>,
) -> Result<Tensor> {
    if !training && mode != QuantizerMode::Round {
        return Err(Error::QuantizerMode { mode: mode.to_string() });
    }
    match mode {
        QuantizerMode::Round => Ok(y.round()?),
        QuantizerMode::Noise => {
            let rng = rng.ok_or_else(|| Error::InvalidArgument {
                what: "NOISE quantization requires an rng".to_string(),
            })?;
            let u = rand_uniform(rng, -0.5, 0.5, y.dims(), y.device())?;
            add_noise_values(y, &u)
        }
        QuantizerMode::Ste => Ok(y.contiguous()?.apply_op1(SteRound)?),
    }
}

/// Rounds on the forward pass with the same kernel as `Round` and passes
/// gradients through unchanged. Composing round from tracked arithmetic
/// would reintroduce rounding error, so this is a dedicated op.
struct SteRound;

impl CustomOp1 for SteRound {
    fn name(&self) -> &'static str {
        "ste-round"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (from, to) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::RequiresContiguous { op: "ste-round" }.bt())?;
        let out = match storage {
            CpuStorage::F32(v) => {
                CpuStorage::F32(v[from..to].iter().map(|x| x.round()).collect())
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(v[from..to].iter().map(|x| x.round()).collect())
            }
            _ => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(
                    storage.dtype(),
                    "ste-round",
                )
                .bt())
            }
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.clone()))
    }
}

/// Adds a precomputed noise tensor; the seam the NOISE mode runs through, so
/// tests can force specific draws.
pub fn add_noise_values(y: &Tensor, u: &Tensor) -> Result<Tensor> {
    if y.dims() != u.dims() {
        return Err(Error::Shape {
            context: "quantizer noise".to_string(),
            expected: format!("{:?}", y.dims()),
            got: format!("{:?}", u.dims()),
        });
    }
    Ok((y + u)?)
}

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
        let h = self.c2.forward(&h)?;
        Ok((x + h)?)
    }
}

/// Learned transform pair E_c / D_c.
pub struct CodecTransforms {
    input: AnalysisInput,
    in_channels: usize,
    /// Extra stride-2 stages bringing pixels down to latent resolution when
    /// the analysis input is the image itself.
    a_pre: Vec<Conv2d>,
    a_in: Option<Conv2d>,
    a_res1: ResBlock,
    a_down: Conv2d,
    a_res2: ResBlock,
    a_res3: ResBlock,
    a_out: Conv2d,
    s_in: Conv2d,
    s_res1: ResBlock,
    s_res2: ResBlock,
    s_up: Conv2d,
    s_res3: ResBlock,
    s_out: Conv2d,
    s: usize,
    m: usize,
}

impl CodecTransforms {
    /// `latent_channels` is the VAE latent depth the synthesis produces;
    /// `vae_f` only matters for the pixel-input variant.
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        input: AnalysisInput,
        latent_channels: usize,
        vae_f: usize,
        width: usize,
        m: usize,
        s: usize,
    ) -> Result<Self> {
        if s != 2 {
            return Err(Error::InvalidArgument {
                what: format!("codec downsampling must be 2, got {s}"),
            });
        }
        let pad1 = Conv2dConfig { padding: 1, ..Default::default() };
        let down = Conv2dConfig { padding: 1, stride: 2, ..Default::default() };
        let mut a_pre = Vec::new();
        let mut a_in = None;
        let in_channels = match input {
            AnalysisInput::Latent => {
                a_in = Some(ps.conv2d(&format!("{prefix}.a_in"), latent_channels, width, 3, pad1)?);
                latent_channels
            }
            AnalysisInput::Pixel => {
                if !vae_f.is_power_of_two() {
                    return Err(Error::InvalidArgument {
                        what: format!("vae downsampling {vae_f} is not a power of two"),
                    });
                }
                let stages = vae_f.trailing_zeros() as usize;
                let mut c_in = 3;
                for i in 0..stages {
                    a_pre.push(ps.conv2d(&format!("{prefix}.a_pre{i}"), c_in, width, 3, down)?);
                    c_in = width;
                }
                3
            }
        };
        Ok(Self {
            input,
            in_channels,
            a_pre,
            a_in,
            a_res1: ResBlock::new(ps, &format!("{prefix}.a_res1"), width)?,
            a_down: ps.conv2d(&format!("{prefix}.a_down"), width, width, 3, down)?,
            a_res2: ResBlock::new(ps, &format!("{prefix}.a_res2"), width)?,
            a_res3: ResBlock::new(ps, &format!("{prefix}.a_res3"), width)?,
            a_out: ps.conv2d(&format!("{prefix}.a_out"), width, m, 3, pad1)?,
            s_in: ps.conv2d(&format!("{prefix}.s_in"), m, width, 3, pad1)?,
            s_res1: ResBlock::new(ps, &format!("{prefix}.s_res1"), width)?,
            s_res2: ResBlock::new(ps, &format!("{prefix}.s_res2"), width)?,
            s_up: ps.conv2d(&format!("{prefix}.s_up"), width, width, 3, pad1)?,
            s_res3: ResBlock::new(ps, &format!("{prefix}.s_res3"), width)?,
            s_out: ps.conv2d(&format!("{prefix}.s_out"), width, latent_channels, 3, pad1)?,
            s,
            m,
        })
    }

    pub fn code_channels(&self) -> usize {
        self.m
    }

    pub fn downsampling(&self) -> usize {
        self.s
    }

    pub fn analysis_input(&self) -> AnalysisInput {
        self.input
    }

    /// Maps the coding-space input (latent or image per construction) to the
    /// unquantized code tensor (B, M, h/s, w/s).
    pub fn analysis(&self, z: &Tensor) -> Result<Tensor> {
        if z.dims().len() != 4 || z.dim(1)? != self.in_channels {
            return Err(Error::Shape {
                context: "analysis input".to_string(),
                expected: format!("(B, {}, h, w)", self.in_channels),
                got: format!("{:?}", z.dims()),
            });
        }
        let mut h = z.clone();
        for conv in &self.a_pre {
            h = conv.forward(&h)?.silu()?;
        }
        if let Some(a_in) = &self.a_in {
            h = a_in.forward(&h)?.silu()?;
        }
        if h.dim(2)? % self.s != 0 {
            return Err(Error::NotDivisible {
                what: "analysis height".to_string(),
                value: h.dim(2)?,
                by: self.s,
            });
        }
        if h.dim(3)? % self.s != 0 {
            return Err(Error::NotDivisible {
                what: "analysis width".to_string(),
                value: h.dim(3)?,
                by: self.s,
            });
        }
        let h = self.a_res1.forward(&h)?;
        let h = self.a_down.forward(&h)?;
        let h = self.a_res2.forward(&h)?;
        let h = self.a_res3.forward(&h)?;
        Ok(self.a_out.forward(&h)?)
    }

    /// Maps a (quantized or STE) code tensor back to a latent-shaped tensor.
    pub fn synthesis(&self, y: &Tensor) -> Result<Tensor> {
        if y.dims().len() != 4 || y.dim(1)? != self.m {
            return Err(Error::Shape {
                context: "synthesis input".to_string(),
                expected: format!("(B, {}, h, w)", self.m),
                got: format!("{:?}", y.dims()),
            });
        }
        let h = self.s_in.forward(y)?.silu()?;
        let h = self.s_res1.forward(&h)?;
        let h = self.s_res2.forward(&h)?;
        let h = h.upsample_nearest2d(h.dim(2)? * self.s, h.dim(3)? * self.s)?;
        let h = self.s_up.forward(&h)?.silu()?;
        let h = self.s_res3.forward(&h)?;
        Ok(self.s_out.forward(&h)?)
    }
}

/// Pixel-resolution synthesis head D'_c for the pixel-space distortion
/// variant: mirrors the synthesis transform but keeps upsampling until image
/// resolution.
pub struct PixelSynthesis {
    s_in: Conv2d,
    res1: ResBlock,
    ups: Vec<Conv2d>,
    res2: ResBlock,
    s_out: Conv2d,
    m: usize,
    total_up: usize,
}

impl PixelSynthesis {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        m: usize,
        width: usize,
        total_up: usize,
    ) -> Result<Self> {
        if !total_up.is_power_of_two() {
            return Err(Error::InvalidArgument {
                what: format!("pixel synthesis upsampling {total_up} is not a power of two"),
            });
        }
        let pad1 = Conv2dConfig { padding: 1, ..Default::default() };
        let stages = total_up.trailing_zeros() as usize;
        let mut ups = Vec::new();
        for i in 0..stages {
            ups.push(ps.conv2d(&format!("{prefix}.up{i}"), width, width, 3, pad1)?);
        }
        Ok(Self {
            s_in: ps.conv2d(&format!("{prefix}.s_in"), m, width, 3, pad1)?,
            res1: ResBlock::new(ps, &format!("{prefix}.res1"), width)?,
            ups,
            res2: ResBlock::new(ps, &format!("{prefix}.res2"), width)?,
            s_out: ps.conv2d(&format!("{prefix}.s_out"), width, 3, 3, pad1)?,
            m,
            total_up,
        })
    }

    /// (B, M, h, w) -> (B, 3, h * total_up, w * total_up).
    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        if y.dims().len() != 4 || y.dim(1)? != self.m {
            return Err(Error::Shape {
                context: "pixel synthesis input".to_string(),
                expected: format!("(B, {}, h, w)", self.m),
                got: format!("{:?}", y.dims()),
            });
        }
        let mut h = self.s_in.forward(y)?.silu()?;
        h = self.res1.forward(&h)?;
        for conv in &self.ups {
            h = h.upsample_nearest2d(h.dim(2)? * 2, h.dim(3)? * 2)?;
            h = conv.forward(&h)?.silu()?;
        }
        h = self.res2.forward(&h)?;
        Ok(self.s_out.forward(&h)?)
    }

    pub fn upsampling(&self) -> usize {
        self.total_up
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn dev() -> Device {
        Device::Cpu
    }

    fn transforms() -> (ParamStore, CodecTransforms) {
        let mut ps = ParamStore::new(0, dev());
        let t =
            CodecTransforms::new(&mut ps, "codec", AnalysisInput::Latent, 4, 4, 32, 48, 2)
                .unwrap();
        (ps, t)
    }

    #[test]
    fn analysis_synthesis_shapes() {
        let (_ps, t) = transforms();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let z = crate::nn::randn(&mut rng, &[1, 4, 16, 16], &dev()).unwrap();
        let y = t.analysis(&z).unwrap();
        assert_eq!(y.dims(), &[1, 48, 8, 8]);
        let back = t.synthesis(&y.round().unwrap()).unwrap();
        assert_eq!(back.dims(), z.dims());
    }

    #[test]
    fn analysis_rejects_wrong_channels_and_odd_dims() {
        let (_ps, t) = transforms();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let bad_ch = crate::nn::randn(&mut rng, &[1, 3, 16, 16], &dev()).unwrap();
        assert!(matches!(t.analysis(&bad_ch), Err(Error::Shape { .. })));
        let odd = crate::nn::randn(&mut rng, &[1, 4, 15, 16], &dev()).unwrap();
        assert!(matches!(t.analysis(&odd), Err(Error::NotDivisible { .. })));
    }

    #[test]
    fn analysis_is_deterministic() {
        let (_ps, t) = transforms();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let z = crate::nn::randn(&mut rng, &[2, 4, 8, 8], &dev()).unwrap();
        let a: Vec<f32> = t.analysis(&z).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = t.analysis(&z).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pixel_input_variant_downsamples_from_image() {
        let mut ps = ParamStore::new(0, dev());
        let t = CodecTransforms::new(&mut ps, "codec", AnalysisInput::Pixel, 4, 4, 16, 24, 2)
            .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = crate::nn::randn(&mut rng, &[1, 3, 64, 64], &dev()).unwrap();
        let y = t.analysis(&x).unwrap();
        assert_eq!(y.dims(), &[1, 24, 8, 8]);
        // Synthesis still lands in latent space.
        let z = t.synthesis(&y.round().unwrap()).unwrap();
        assert_eq!(z.dims(), &[1, 4, 16, 16]);
    }

    #[test]
    fn pixel_synthesis_reaches_image_resolution() {
        let mut ps = ParamStore::new(0, dev());
        let p = PixelSynthesis::new(&mut ps, "pixeldec", 24, 16, 8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let y = crate::nn::randn(&mut rng, &[1, 24, 8, 8], &dev()).unwrap();
        let img = p.forward(&y).unwrap();
        assert_eq!(img.dims(), &[1, 3, 64, 64]);
    }

    #[test]
    fn round_ties_away_from_zero() {
        let y = Tensor::from_vec(
            vec![2.4f32, -1.5, 1.5, -2.5, 2.5, 0.5, -0.5, 0.49, -0.49],
            (9,),
            &dev(),
        )
        .unwrap();
        let q: Vec<f32> = quantize(&y, QuantizerMode::Round, false, None)
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_eq!(q, vec![2.0, -2.0, 2.0, -3.0, 3.0, 1.0, -1.0, 0.0, -0.0]);
    }

    #[test]
    fn round_is_idempotent() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let y = crate::nn::randn(&mut rng, &[64], &dev()).unwrap();
        let q1 = quantize(&y, QuantizerMode::Round, false, None).unwrap();
        let q2 = quantize(&q1, QuantizerMode::Round, false, None).unwrap();
        let a: Vec<f32> = q1.to_vec1().unwrap();
        let b: Vec<f32> = q2.to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_mode_bounded_and_zero_noise_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let y = crate::nn::randn(&mut rng, &[512], &dev()).unwrap();
        let q = quantize(&y, QuantizerMode::Noise, true, Some(&mut rng)).unwrap();
        let diff: Vec<f32> = (q - &y).unwrap().abs().unwrap().to_vec1().unwrap();
        assert!(diff.iter().all(|d| *d <= 0.5));
        let zeros = Tensor::zeros((512,), candle_core::DType::F32, &dev()).unwrap();
        let same = add_noise_values(&y, &zeros).unwrap();
        let a: Vec<f32> = y.to_vec1().unwrap();
        let b: Vec<f32> = same.to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn surrogate_modes_require_training() {
        let y = Tensor::zeros((4,), candle_core::DType::F32, &dev()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(matches!(
            quantize(&y, QuantizerMode::Noise, false, Some(&mut rng)),
            Err(Error::QuantizerMode { .. })
        ));
        assert!(matches!(
            quantize(&y, QuantizerMode::Ste, false, None),
            Err(Error::QuantizerMode { .. })
        ));
    }

    #[test]
    fn ste_forward_equals_round_bit_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let y = (crate::nn::randn(&mut rng, &[4096], &dev()).unwrap() * 7.3).unwrap();
        let r: Vec<f32> = quantize(&y, QuantizerMode::Round, false, None)
            .unwrap()
            .to_vec1()
            .unwrap();
        let s: Vec<f32> = quantize(&y, QuantizerMode::Ste, true, None)
            .unwrap()
            .to_vec1()
            .unwrap();
        let rb: Vec<u32> = r.iter().map(|v| v.to_bits()).collect();
        let sb: Vec<u32> = s.iter().map(|v| v.to_bits()).collect();
        assert_eq!(rb, sb);
    }

    #[test]
    fn ste_gradient_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let y0 = crate::nn::randn(&mut rng, &[16], &dev()).unwrap();
        let y = Var::from_tensor(&y0).unwrap();
        let q = quantize(y.as_tensor(), QuantizerMode::Ste, true, None).unwrap();
        let loss = q.sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g: Vec<f32> = grads.get(y.as_tensor()).unwrap().to_vec1().unwrap();
        assert!(g.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn noise_is_uniform_by_ks_test() {
        // Kolmogorov-Smirnov against U(-0.5, 0.5) on 1e5 draws; the p = 0.01
        // critical value is 1.628 / sqrt(n).
        let n = 100_000usize;
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let y = Tensor::zeros((n,), candle_core::DType::F32, &dev()).unwrap();
        let q = quantize(&y, QuantizerMode::Noise, true, Some(&mut rng)).unwrap();
        let mut u: Vec<f32> = q.to_vec1().unwrap();
        u.sort_by(f32::total_cmp);
        let mut d_max = 0.0f64;
        for (i, v) in u.iter().enumerate() {
            let cdf = (*v as f64 + 0.5).clamp(0.0, 1.0);
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            d_max = d_max.max((cdf - emp_lo).abs()).max((emp_hi - cdf).abs());
        }
        let crit = 1.628 / (n as f64).sqrt();
        assert!(d_max < crit, "KS statistic {d_max} exceeds {crit}");
    }

    proptest! {
        #[test]
        fn round_idempotent_property(vals in proptest::collection::vec(-100.0f32..100.0, 1..64)) {
            let n = vals.len();
            let y = Tensor::from_vec(vals, (n,), &dev()).unwrap();
            let q1 = quantize(&y, QuantizerMode::Round, false, None).unwrap();
            let q2 = quantize(&q1, QuantizerMode::Round, false, None).unwrap();
            let a: Vec<f32> = q1.to_vec1().unwrap();
            let b: Vec<f32> = q2.to_vec1().unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
