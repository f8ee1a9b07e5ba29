//! Semantic consistency loss in the denoiser's feature space.
//!
//! Features are internal activations captured during a forward pass of the
//! bare denoiser (no control injection). The loss is the negated mean
//! per-position cosine similarity along the channel axis, so minimizing it
//! aligns the decoded latent's features with the ground-truth latent's.

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::diffusion_core::{add_noise, NoiseSchedule, Site, UNet, SITES};
use crate::error::{Error, Result};
use crate::nn::randn;

/// Norm products below this count as zero-vector positions; their
/// similarity is neutral (0) instead of dividing by zero.
pub const COSINE_EPS: f64 = 1e-8;

/// Runs the denoiser on `z` at timestep `t` and returns the activation at
/// `site`, flattened to (B, C, N) with one vector per spatial position.
pub fn extract_semantic_features(
    denoiser: &UNet,
    z: &Tensor,
    site: Site,
    t: usize,
    cond: &Tensor,
) -> Result<Tensor> {
    let b = z.dim(0)?;
    let tvec = vec![t; b];
    let (_, cap) = denoiser.forward_with(z, &tvec, cond, None, Some(site))?;
    let f = cap.ok_or_else(|| Error::InvalidSite { site: site.name().to_string() })?;
    let (bb, c, h, w) = f.dims4()?;
    Ok(f.reshape((bb, c, h * w))?)
}

/// Negated mean per-position cosine similarity along the channel axis.
/// Accepts (C, N) or (B, C, N); positions with a vanishing norm product
/// contribute similarity 0.
pub fn sc_loss(f: &Tensor, f_hat: &Tensor) -> Result<Tensor> {
    if f.dims() != f_hat.dims() {
        return Err(Error::Shape {
            context: "semantic features".to_string(),
            expected: format!("{:?}", f.dims()),
            got: format!("{:?}", f_hat.dims()),
        });
    }
    let rank = f.dims().len();
    if rank < 2 {
        return Err(Error::Shape {
            context: "semantic features".to_string(),
            expected: "(C, N) or (B, C, N)".to_string(),
            got: format!("{:?}", f.dims()),
        });
    }
    let ch = rank - 2;
    let dot = (f * f_hat)?.sum(ch)?;
    let na = f.sqr()?.sum(ch)?.sqrt()?;
    let nb = f_hat.sqr()?.sum(ch)?.sqrt()?;
    let denom = (na * nb)?.maximum(COSINE_EPS)?;
    let sim = (dot / denom)?;
    Ok(sim.mean_all()?.neg()?)
}

/// Noisy-input variant: one shared noise draw and one timestep
/// t ~ Uniform{1..t_max} perturb both latents before feature extraction.
/// `t_max` 0 degenerates to the clean variant (features at t = 0).
#[allow(clippy::too_many_arguments)]
pub fn sc_loss_noisy(
    denoiser: &UNet,
    sched: &NoiseSchedule,
    z: &Tensor,
    z_hat: &Tensor,
    t_max: usize,
    site: Site,
    cond: &Tensor,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor> {
    if t_max > sched.t_steps() {
        return Err(Error::TimestepOutOfRange { t: t_max, steps: sched.t_steps() });
    }
    if z.dims() != z_hat.dims() {
        return Err(Error::Shape {
            context: "semantic loss latents".to_string(),
            expected: format!("{:?}", z.dims()),
            got: format!("{:?}", z_hat.dims()),
        });
    }
    if t_max == 0 {
        let f = extract_semantic_features(denoiser, z, site, 0, cond)?;
        let f_hat = extract_semantic_features(denoiser, z_hat, site, 0, cond)?;
        return sc_loss(&f, &f_hat);
    }
    let t = rng.random_range(1..=t_max);
    let b = z.dim(0)?;
    let eps = randn(rng, z.dims(), z.device())?.to_dtype(z.dtype())?;
    let tvec = vec![t; b];
    let z_t = add_noise(z, &tvec, &eps, sched)?;
    let z_hat_t = add_noise(z_hat, &tvec, &eps, sched)?;
    let f = extract_semantic_features(denoiser, &z_t, site, t, cond)?;
    let f_hat = extract_semantic_features(denoiser, &z_hat_t, site, t, cond)?;
    sc_loss(&f, &f_hat)
}

/// Per-site feature divergence between two latents: 1 minus the mean
/// per-position cosine similarity, one row per site in forward order.
/// Lower values mean more similar features; the range is [0, 2].
pub fn feature_divergence_profile(
    denoiser: &UNet,
    z: &Tensor,
    z_hat: &Tensor,
    cond: &Tensor,
) -> Result<Vec<(String, f64)>> {
    if z.dims() != z_hat.dims() {
        return Err(Error::Shape {
            context: "divergence profile latents".to_string(),
            expected: format!("{:?}", z.dims()),
            got: format!("{:?}", z_hat.dims()),
        });
    }
    let mut out = Vec::with_capacity(SITES.len());
    for site in SITES {
        let f = extract_semantic_features(denoiser, z, site, 0, cond)?;
        let f_hat = extract_semantic_features(denoiser, z_hat, site, 0, cond)?;
        let neg_mean_cos = crate::nn::scalar(&sc_loss(&f, &f_hat)?)?;
        out.push((site.name().to_string(), 1.0 + neg_mean_cos));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::SeedableRng;

    use crate::nn::{scalar, ParamStore};

    fn dev() -> Device {
        Device::Cpu
    }

    fn small_unet() -> (ParamStore, UNet) {
        let mut ps = ParamStore::new(0, dev());
        let u = UNet::new(&mut ps, "denoiser", 4, [8, 16], 32).unwrap();
        (ps, u)
    }

    fn feat(seed: u64, dims: &[usize]) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        randn(&mut rng, dims, &dev()).unwrap()
    }

    #[test]
    fn identical_features_give_minus_one() {
        let f = feat(0, &[6, 10]);
        let v = scalar(&sc_loss(&f, &f).unwrap()).unwrap();
        assert!((v + 1.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn negated_features_give_plus_one() {
        let f = feat(1, &[2, 6, 10]);
        let v = scalar(&sc_loss(&f, &f.neg().unwrap()).unwrap()).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn cosine_is_scale_invariant_and_symmetric() {
        let f = feat(2, &[4, 20]);
        let g = feat(3, &[4, 20]);
        let base = scalar(&sc_loss(&f, &g).unwrap()).unwrap();
        let scaled = scalar(&sc_loss(&f, &(&g * 2.0).unwrap()).unwrap()).unwrap();
        assert!((base - scaled).abs() < 1e-6);
        let swapped = scalar(&sc_loss(&g, &f).unwrap()).unwrap();
        assert!((base - swapped).abs() < 1e-6);
        assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn zero_vector_positions_are_neutral() {
        // Position 0: identical vectors (sim 1). Position 1: zero on one
        // side (sim 0). Mean similarity 0.5, loss -0.5.
        let f = Tensor::from_vec(vec![1f32, 0.0, 2.0, 0.0], (2, 2), &dev()).unwrap();
        let g = Tensor::from_vec(vec![1f32, 0.0, 2.0, 0.0], (2, 2), &dev()).unwrap();
        let v = scalar(&sc_loss(&f, &g).unwrap()).unwrap();
        assert!((v + 0.5).abs() < 1e-6, "{v}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let f = feat(4, &[4, 8]);
        let g = feat(4, &[4, 9]);
        assert!(sc_loss(&f, &g).is_err());
        let one_d = feat(4, &[4]);
        assert!(sc_loss(&one_d, &one_d).is_err());
    }

    #[test]
    fn sc_gradient_matches_finite_differences() {
        let c = 3;
        let n = 4;
        let f = feat(5, &[c, n]).to_dtype(DType::F64).unwrap();
        let g0 = feat(6, &[c, n]).to_dtype(DType::F64).unwrap();
        let var = Var::from_tensor(&g0).unwrap();
        let loss = sc_loss(&f, var.as_tensor()).unwrap();
        let grads = loss.backward().unwrap();
        let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();

        let base: Vec<f64> = g0.flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for idx in 0..base.len() {
            let eval = |delta: f64| -> f64 {
                let mut v = base.clone();
                v[idx] += delta;
                let t = Tensor::from_vec(v, (c, n), &dev()).unwrap();
                scalar(&sc_loss(&f, &t).unwrap()).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-8);
            assert!(rel <= 1e-4, "idx {idx}: fd {fd} vs {} rel {rel}", g[idx]);
        }
    }

    #[test]
    fn extraction_is_deterministic_and_site_shaped() {
        let (_ps, u) = small_unet();
        let z = feat(7, &[2, 4, 16, 16]);
        let cond = Tensor::zeros((2, 32), DType::F32, &dev()).unwrap();
        for site in SITES {
            let a = extract_semantic_features(&u, &z, site, 0, &cond).unwrap();
            let b = extract_semantic_features(&u, &z, site, 0, &cond).unwrap();
            let s = u.site_shape(site, 2, 16, 16);
            assert_eq!(a.dims(), [s[0], s[1], s[2] * s[3]]);
            let av: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
            let bv: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(av, bv);
        }
    }

    #[test]
    fn noisy_variant_with_identical_latents_is_minus_one() {
        let (_ps, u) = small_unet();
        let sched = NoiseSchedule::scaled_linear(100, 8.5e-4, 1.2e-2).unwrap();
        let z = feat(8, &[1, 4, 8, 8]);
        let cond = Tensor::zeros((1, 32), DType::F32, &dev()).unwrap();
        for seed in 0..3 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let v = scalar(
                &sc_loss_noisy(&u, &sched, &z, &z, 100, Site::Middle, &cond, &mut rng).unwrap(),
            )
            .unwrap();
            assert!((v + 1.0).abs() < 1e-5, "seed {seed}: {v}");
        }
    }

    #[test]
    fn t_max_zero_equals_clean_variant() {
        let (_ps, u) = small_unet();
        let sched = NoiseSchedule::scaled_linear(50, 8.5e-4, 1.2e-2).unwrap();
        let z = feat(9, &[1, 4, 8, 8]);
        let z_hat = feat(10, &[1, 4, 8, 8]);
        let cond = Tensor::zeros((1, 32), DType::F32, &dev()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let noisy =
            scalar(&sc_loss_noisy(&u, &sched, &z, &z_hat, 0, Site::Middle, &cond, &mut rng).unwrap())
                .unwrap();
        let f = extract_semantic_features(&u, &z, Site::Middle, 0, &cond).unwrap();
        let f_hat = extract_semantic_features(&u, &z_hat, Site::Middle, 0, &cond).unwrap();
        let clean = scalar(&sc_loss(&f, &f_hat).unwrap()).unwrap();
        assert_eq!(noisy, clean);
    }

    #[test]
    fn t_max_beyond_schedule_rejected() {
        let (_ps, u) = small_unet();
        let sched = NoiseSchedule::scaled_linear(50, 8.5e-4, 1.2e-2).unwrap();
        let z = feat(11, &[1, 4, 8, 8]);
        let cond = Tensor::zeros((1, 32), DType::F32, &dev()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(sc_loss_noisy(&u, &sched, &z, &z, 51, Site::Middle, &cond, &mut rng).is_err());
    }

    #[test]
    fn divergence_profile_contract() {
        let (_ps, u) = small_unet();
        let z = feat(12, &[1, 4, 16, 16]);
        let cond = Tensor::zeros((1, 32), DType::F32, &dev()).unwrap();
        let same = feature_divergence_profile(&u, &z, &z, &cond).unwrap();
        assert_eq!(same.len(), SITES.len());
        for (i, (name, d)) in same.iter().enumerate() {
            assert_eq!(name, SITES[i].name());
            assert!(d.abs() < 1e-5, "{name}: {d}");
        }
        let other = feat(13, &[1, 4, 16, 16]);
        for (name, d) in feature_divergence_profile(&u, &z, &other, &cond).unwrap() {
            assert!((0.0..=2.0).contains(&d), "{name}: {d}");
        }
    }
}
