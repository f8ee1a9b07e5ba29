//! Training data: a procedurally generated labeled shape corpus and random
//! patch sampling from an image folder.
//!
//! The synthetic corpus gives every image exact ground-truth tags (one
//! shape word, one color word), so the tag oracle and the classifier have a
//! learnable, verifiable target without any external dataset.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tagging::{TagDictionary, TagExtractor, TagSet};

pub const SHAPE_TAGS: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const COLOR_TAGS: [&str; 4] = ["red", "green", "blue", "yellow"];

const COLOR_VALUES: [[f32; 3]; 4] = [
    [0.90, 0.12, 0.12],
    [0.10, 0.80, 0.18],
    [0.15, 0.25, 0.90],
    [0.95, 0.85, 0.10],
];

/// The vocabulary used by the synthetic corpus: shape words then color
/// words, ids in that order.
pub fn builtin_dictionary() -> TagDictionary {
    let tags: Vec<&str> = SHAPE_TAGS.iter().chain(COLOR_TAGS.iter()).copied().collect();
    TagDictionary::from_tags(tags).expect("static vocabulary is valid")
}

/// One labeled training image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub tags: TagSet,
}

/// Deterministic generator of labeled shape images: a smooth two-color
/// background gradient with one solid colored shape on top.
pub struct SyntheticSampler {
    size: usize,
    rng: ChaCha12Rng,
    device: Device,
}

impl SyntheticSampler {
    pub fn new(size: usize, seed: u64, device: Device) -> Result<Self> {
        if size < 16 {
            return Err(Error::InvalidArgument {
                what: format!("synthetic images need size >= 16, got {size}"),
            });
        }
        Ok(Self { size, rng: ChaCha12Rng::seed_from_u64(seed), device })
    }

    pub fn sample(&mut self) -> Result<Sample> {
        let s = self.size;
        let shape_idx = self.rng.random_range(0..SHAPE_TAGS.len());
        let color_idx = self.rng.random_range(0..COLOR_TAGS.len());
        let color = COLOR_VALUES[color_idx];

        // Background: linear gradient between two muted tones.
        let g0: [f32; 3] = std::array::from_fn(|_| self.rng.random_range(0.25..0.65));
        let g1: [f32; 3] = std::array::from_fn(|_| self.rng.random_range(0.25..0.65));
        let horizontal = self.rng.random_range(0..2) == 0;

        let r = self.rng.random_range(s as f64 / 6.0..s as f64 / 4.0);
        let cx = self.rng.random_range(r + 1.0..s as f64 - r - 1.0);
        let cy = self.rng.random_range(r + 1.0..s as f64 - r - 1.0);

        let inside = |x: f64, y: f64| -> bool {
            let dx = x - cx;
            let dy = y - cy;
            match shape_idx {
                0 => dx * dx + dy * dy <= r * r,
                1 => dx.abs() <= r && dy.abs() <= r,
                // Upward triangle: apex on top, width grows toward the base.
                2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
                _ => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
            }
        };

        let mut data = vec![0f32; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                let t = if horizontal { x as f32 } else { y as f32 } / (s - 1) as f32;
                let hit = inside(x as f64 + 0.5, y as f64 + 0.5);
                for c in 0..3 {
                    let v = if hit { color[c] } else { g0[c] + (g1[c] - g0[c]) * t };
                    data[c * s * s + y * s + x] = v;
                }
            }
        }
        let image = Tensor::from_vec(data, (3, s, s), &self.device)?;
        let tags = TagSet::new(vec![shape_idx as u16, (SHAPE_TAGS.len() + color_idx) as u16]);
        Ok(Sample { image, tags })
    }

    /// A stacked batch, shape (n, 3, S, S), plus per-image tag sets.
    pub fn batch(&mut self, n: usize) -> Result<(Tensor, Vec<TagSet>)> {
        if n == 0 {
            return Err(Error::InvalidArgument { what: "empty batch".to_string() });
        }
        let mut images = Vec::with_capacity(n);
        let mut tags = Vec::with_capacity(n);
        for _ in 0..n {
            let s = self.sample()?;
            images.push(s.image);
            tags.push(s.tags);
        }
        Ok((Tensor::stack(&images, 0)?, tags))
    }
}

/// Random square patches cropped from the images of a folder. Tags come
/// from a caller-supplied extractor, or stay empty without one.
pub struct FolderSampler {
    images: Vec<Tensor>,
    patch: usize,
    rng: ChaCha12Rng,
}

impl FolderSampler {
    pub fn new(dir: impl AsRef<Path>, patch: usize, seed: u64, device: &Device) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("png") | Some("ppm")
                )
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::InvalidArgument {
                what: format!("no png or ppm images in {}", dir.as_ref().display()),
            });
        }
        let mut images = Vec::with_capacity(paths.len());
        for p in &paths {
            let img = crate::image::load_image(p, device)?;
            let (_, h, w) = img.dims3()?;
            if h < patch || w < patch {
                return Err(Error::InvalidArgument {
                    what: format!(
                        "{} is {h}x{w}, smaller than the {patch}-pixel patch",
                        p.display()
                    ),
                });
            }
            images.push(img);
        }
        Ok(Self { images, patch, rng: ChaCha12Rng::seed_from_u64(seed) })
    }

    pub fn sample(&mut self, extractor: Option<&dyn TagExtractor>) -> Result<Sample> {
        let idx = self.rng.random_range(0..self.images.len());
        let img = &self.images[idx];
        let (_, h, w) = img.dims3()?;
        let y = self.rng.random_range(0..=h - self.patch);
        let x = self.rng.random_range(0..=w - self.patch);
        let image = img.narrow(1, y, self.patch)?.narrow(2, x, self.patch)?.contiguous()?;
        let tags = match extractor {
            Some(e) => e.extract(&image)?,
            None => TagSet::empty(),
        };
        Ok(Sample { image, tags })
    }

    pub fn batch(
        &mut self,
        n: usize,
        extractor: Option<&dyn TagExtractor>,
    ) -> Result<(Tensor, Vec<TagSet>)> {
        if n == 0 {
            return Err(Error::InvalidArgument { what: "empty batch".to_string() });
        }
        let mut images = Vec::with_capacity(n);
        let mut tags = Vec::with_capacity(n);
        for _ in 0..n {
            let s = self.sample(extractor)?;
            images.push(s.image);
            tags.push(s.tags);
        }
        Ok((Tensor::stack(&images, 0)?, tags))
    }
}

/// Multi-hot float targets for classifier training, shape (B, n_tags).
pub fn multi_hot(sets: &[TagSet], n_tags: usize, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; sets.len() * n_tags];
    for (row, set) in sets.iter().enumerate() {
        for &id in set.ids() {
            if (id as usize) >= n_tags {
                return Err(Error::TagOutOfRange { id: id as u32 });
            }
            data[row * n_tags + id as usize] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (sets.len(), n_tags), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn builtin_dictionary_covers_labels() {
        let d = builtin_dictionary();
        assert_eq!(d.len(), 8);
        assert_eq!(d.id_of("circle").unwrap(), 0);
        assert_eq!(d.id_of("red").unwrap(), 4);
    }

    #[test]
    fn samples_are_valid_and_labeled() {
        let mut g = SyntheticSampler::new(32, 0, dev()).unwrap();
        for _ in 0..8 {
            let s = g.sample().unwrap();
            assert_eq!(s.image.dims(), [3, 32, 32]);
            let v: Vec<f32> = s.image.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
            assert_eq!(s.tags.len(), 2);
            let ids = s.tags.ids();
            assert!(ids[0] < 4 && (4..8).contains(&ids[1]));
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let img = |seed| -> Vec<f32> {
            let mut g = SyntheticSampler::new(24, seed, dev()).unwrap();
            g.sample().unwrap().image.flatten_all().unwrap().to_vec1().unwrap()
        };
        assert_eq!(img(5), img(5));
        assert_ne!(img(5), img(6));
    }

    #[test]
    fn batch_shapes() {
        let mut g = SyntheticSampler::new(16, 1, dev()).unwrap();
        let (images, tags) = g.batch(3).unwrap();
        assert_eq!(images.dims(), [3, 3, 16, 16]);
        assert_eq!(tags.len(), 3);
        assert!(g.batch(0).is_err());
    }

    #[test]
    fn folder_sampler_crops_patches() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = SyntheticSampler::new(40, 2, dev()).unwrap();
        for i in 0..3 {
            let s = g.sample().unwrap();
            crate::image::save_image(&s.image, dir.path().join(format!("{i}.png"))).unwrap();
        }
        let mut f = FolderSampler::new(dir.path(), 16, 0, &dev()).unwrap();
        let (images, tags) = f.batch(4, None).unwrap();
        assert_eq!(images.dims(), [4, 3, 16, 16]);
        assert!(tags.iter().all(|t| t.is_empty()));
    }

    #[test]
    fn folder_sampler_rejects_empty_and_small() {
        let dir = tempfile::tempdir().unwrap();
        assert!(FolderSampler::new(dir.path(), 16, 0, &dev()).is_err());
        let mut g = SyntheticSampler::new(16, 3, dev()).unwrap();
        let s = g.sample().unwrap();
        crate::image::save_image(&s.image, dir.path().join("small.png")).unwrap();
        assert!(FolderSampler::new(dir.path(), 32, 0, &dev()).is_err());
    }

    #[test]
    fn multi_hot_targets() {
        let sets = vec![TagSet::new(vec![0, 3]), TagSet::empty()];
        let t = multi_hot(&sets, 4, &dev()).unwrap();
        let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(multi_hot(&[TagSet::new(vec![4])], 4, &dev()).is_err());
    }
}
