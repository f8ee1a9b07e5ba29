//! Parameter storage, deterministic initialization and checkpoint io.
//!
//! All learnable tensors live in a [`ParamStore`], keyed by dotted path
//! names. Initialization draws from a seeded ChaCha12 stream so two stores
//! built with the same seed and the same creation order hold identical
//! weights on any platform. Checkpoints are safetensors files whose string
//! metadata carries the config text and auxiliary scalars; the tensor
//! payload is the full store.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2dConfig, Embedding, GroupNorm, Linear, Module};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};

/// Bumped whenever the checkpoint layout changes incompatibly.
pub const CHECKPOINT_VERSION: &str = "1";

/// Metadata key holding the checkpoint format version.
pub const META_VERSION: &str = "format.version";

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    Uniform { lo: f64, hi: f64 },
    Normal { std: f64 },
}

/// 2D convolution layer.
///
/// Carries its own forward instead of using candle_nn's layer: the CPU conv
/// kernel in candle 0.9 misreads a contiguous NCHW input as channels-last
/// whenever C == H == W, because its fast-path layout check compares the
/// strides in the wrong order. Shifting the width stride off that pattern
/// (pad one column, narrow it away) forces the kernel onto its copying
/// path, which indexes correctly for every layout.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    cfg: Conv2dConfig,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, cfg: Conv2dConfig) -> Self {
        Self { weight, bias, cfg }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let x = match x.dims4() {
            Ok((_b, c, h, w)) if x.stride() == [h * w * c, w * c, c, 1] => {
                x.pad_with_zeros(3, 0, 1)?.narrow(3, 0, w)?
            }
            _ => x.clone(),
        };
        let y = x.conv2d(
            &self.weight,
            self.cfg.padding,
            self.cfg.stride,
            self.cfg.dilation,
            self.cfg.groups,
        )?;
        let b = self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?;
        y.broadcast_add(&b)
    }
}

/// Named collection of trainable variables with a deterministic init stream.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    rng: ChaCha12Rng,
    vars: BTreeMap<String, Var>,
    creation_order: Vec<String>,
}

impl ParamStore {
    pub fn new(seed: u64, device: Device) -> Self {
        Self::with_dtype(seed, device, DType::F32)
    }

    /// Store holding parameters in the given float dtype. Gradient-check
    /// tests use F64; checkpoints are always written as F32.
    pub fn with_dtype(seed: u64, device: Device, dtype: DType) -> Self {
        Self {
            device,
            dtype,
            rng: ChaCha12Rng::seed_from_u64(seed),
            vars: BTreeMap::new(),
            creation_order: Vec::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Returns the tensor registered under `name`, creating and initializing
    /// it if absent. An existing tensor with a different shape is an error.
    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Shape {
                    context: format!("parameter {name}"),
                    expected: format!("{shape:?}"),
                    got: format!("{:?}", v.dims()),
                });
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, hi } => (0..n).map(|_| self.rng.random_range(lo..hi)).collect(),
            Init::Normal { std } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        self.creation_order.push(name.to_string());
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Variables whose name starts with any of the given prefixes. Used to
    /// hand a stage-specific subset to the optimizer while the rest stays
    /// frozen.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies every `src_prefix.*` value onto the matching `dst_prefix.*`
    /// variable. All destinations must already exist with matching shapes.
    pub fn copy_prefix(&mut self, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
        let src_names: Vec<String> = self
            .vars
            .keys()
            .filter(|k| k.starts_with(src_prefix))
            .cloned()
            .collect();
        if src_names.is_empty() {
            return Err(Error::Checkpoint(format!(
                "no parameters under prefix {src_prefix:?}"
            )));
        }
        let mut copied = 0;
        for src in src_names {
            let dst = format!("{dst_prefix}{}", &src[src_prefix.len()..]);
            let value = self.vars[&src].as_tensor().clone();
            let dst_var = self.vars.get(&dst).ok_or_else(|| {
                Error::Checkpoint(format!("missing destination parameter {dst:?}"))
            })?;
            dst_var.set(&value)?;
            copied += 1;
        }
        Ok(copied)
    }

    /// Writes every variable plus string metadata to a safetensors file.
    /// `META_VERSION` is always stamped in.
    pub fn save(
        &self,
        path: impl AsRef<Path>,
        metadata: &BTreeMap<String, String>,
    ) -> Result<()> {
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, var) in &self.vars {
            let t = var.as_tensor().to_dtype(DType::F32)?;
            let shape = t.dims().to_vec();
            let flat: Vec<f32> = t.flatten_all()?.to_vec1::<f32>()?;
            let bytes: Vec<u8> = flat.iter().flat_map(|v| v.to_le_bytes()).collect();
            buffers.push((name.clone(), shape, bytes));
        }
        let views: Vec<(&str, TensorView)> = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                let view = TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map_err(|e| Error::Checkpoint(format!("{e}")))?;
                Ok((name.as_str(), view))
            })
            .collect::<Result<_>>()?;
        let mut meta: HashMap<String, String> = metadata
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        meta.insert(META_VERSION.to_string(), CHECKPOINT_VERSION.to_string());
        safetensors::serialize_to_file(views, Some(meta), path.as_ref())
            .map_err(|e| Error::Checkpoint(format!("{e}")))?;
        Ok(())
    }

    /// Loads a checkpoint saved by [`ParamStore::save`]. Returns the store
    /// and the string metadata. Rejects unknown format versions.
    pub fn load(
        path: impl AsRef<Path>,
        seed: u64,
        device: Device,
    ) -> Result<(Self, BTreeMap<String, String>)> {
        let buffer = std::fs::read(path.as_ref()).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        let (_, meta_block) = SafeTensors::read_metadata(&buffer)
            .map_err(|e| Error::Checkpoint(format!("{e}")))?;
        let metadata: BTreeMap<String, String> = meta_block
            .metadata()
            .as_ref()
            .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
            .unwrap_or_default();
        match metadata.get(META_VERSION).map(String::as_str) {
            Some(CHECKPOINT_VERSION) => {}
            Some(other) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint version {other:?}, expected {CHECKPOINT_VERSION:?}"
                )))
            }
            None => {
                return Err(Error::Checkpoint(
                    "checkpoint has no format version metadata".to_string(),
                ))
            }
        }
        let st = SafeTensors::deserialize(&buffer)
            .map_err(|e| Error::Checkpoint(format!("{e}")))?;
        let mut store = Self::new(seed, device);
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has dtype {:?}, expected F32",
                    view.dtype()
                )));
            }
            let raw = view.data();
            let mut flat = Vec::with_capacity(raw.len() / 4);
            for chunk in raw.chunks_exact(4) {
                flat.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            let t = Tensor::from_vec(flat, view.shape(), &store.device)?;
            let var = Var::from_tensor(&t)?;
            store.creation_order.push(name.to_string());
            store.vars.insert(name, var);
        }
        Ok((store, metadata))
    }

    // Layer builders. Each registers `<name>.weight` / `<name>.bias`.

    pub fn conv2d(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        cfg: Conv2dConfig,
    ) -> Result<Conv2d> {
        let fan_in = (in_c / cfg.groups) * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.var(
            &format!("{name}.weight"),
            &[out_c, in_c / cfg.groups, k, k],
            Init::Uniform { lo: -bound, hi: bound },
        )?;
        let b = self.var(
            &format!("{name}.bias"),
            &[out_c],
            Init::Uniform { lo: -bound, hi: bound },
        )?;
        Ok(Conv2d::new(w, b, cfg))
    }

    /// Convolution with weight and bias initialized to zero, so its output
    /// starts as exactly zero regardless of input.
    pub fn conv2d_zero(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        cfg: Conv2dConfig,
    ) -> Result<Conv2d> {
        let w = self.var(
            &format!("{name}.weight"),
            &[out_c, in_c / cfg.groups, k, k],
            Init::Const(0.0),
        )?;
        let b = self.var(&format!("{name}.bias"), &[out_c], Init::Const(0.0))?;
        Ok(Conv2d::new(w, b, cfg))
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = self.var(
            &format!("{name}.weight"),
            &[out_dim, in_dim],
            Init::Uniform { lo: -bound, hi: bound },
        )?;
        let b = self.var(
            &format!("{name}.bias"),
            &[out_dim],
            Init::Uniform { lo: -bound, hi: bound },
        )?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn group_norm(&mut self, name: &str, channels: usize, groups: usize) -> Result<GroupNorm> {
        let w = self.var(&format!("{name}.weight"), &[channels], Init::Const(1.0))?;
        let b = self.var(&format!("{name}.bias"), &[channels], Init::Const(0.0))?;
        Ok(GroupNorm::new(w, b, channels, groups, 1e-5)?)
    }

    pub fn embedding(&mut self, name: &str, vocab: usize, dim: usize) -> Result<Embedding> {
        let w = self.var(
            &format!("{name}.weight"),
            &[vocab, dim],
            Init::Normal { std: 0.02 },
        )?;
        Ok(Embedding::new(w, dim))
    }
}

/// Standard normal sample tensor drawn from an explicit RNG.
pub fn randn(rng: &mut ChaCha12Rng, shape: &[usize], device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

/// Uniform sample tensor on `[lo, hi)` drawn from an explicit RNG.
pub fn rand_uniform(
    rng: &mut ChaCha12Rng,
    lo: f32,
    hi: f32,
    shape: &[usize],
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

/// Extracts the single value of a one-element tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    let flat = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if flat.len() != 1 {
        return Err(Error::Shape {
            context: "scalar extraction".to_string(),
            expected: "1 element".to_string(),
            got: format!("{} elements", flat.len()),
        });
    }
    Ok(flat[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn same_seed_same_weights() {
        let mut a = ParamStore::new(3, dev());
        let mut b = ParamStore::new(3, dev());
        let ta = a.var("w", &[4, 3], Init::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
        let tb = b.var("w", &[4, 3], Init::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
        let va: Vec<f32> = ta.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = tb.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn different_seed_different_weights() {
        let mut a = ParamStore::new(3, dev());
        let mut b = ParamStore::new(4, dev());
        let ta = a.var("w", &[16], Init::Normal { std: 1.0 }).unwrap();
        let tb = b.var("w", &[16], Init::Normal { std: 1.0 }).unwrap();
        let va: Vec<f32> = ta.to_vec1().unwrap();
        let vb: Vec<f32> = tb.to_vec1().unwrap();
        assert_ne!(va, vb);
    }

    #[test]
    fn var_is_get_or_init() {
        let mut ps = ParamStore::new(0, dev());
        let a = ps.var("x", &[2, 2], Init::Normal { std: 1.0 }).unwrap();
        let b = ps.var("x", &[2, 2], Init::Normal { std: 1.0 }).unwrap();
        let va: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
        assert!(ps.var("x", &[3], Init::Const(0.0)).is_err());
    }

    #[test]
    fn zero_conv_outputs_zero() {
        let mut ps = ParamStore::new(1, dev());
        let conv = ps
            .conv2d_zero("z", 3, 5, 3, Conv2dConfig { padding: 1, ..Default::default() })
            .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x = randn(&mut rng, &[2, 3, 8, 8], &dev()).unwrap();
        let y = candle_nn::Module::forward(&conv, &x).unwrap();
        let max = y.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(max, 0.0);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let mut ps = ParamStore::new(5, dev());
        ps.var("a.weight", &[3, 2], Init::Normal { std: 0.5 }).unwrap();
        ps.var("b.bias", &[7], Init::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("config".to_string(), "seed = 5\n".to_string());
        ps.save(&path, &meta).unwrap();

        let (loaded, got_meta) = ParamStore::load(&path, 0, dev()).unwrap();
        assert_eq!(got_meta.get("config").unwrap(), "seed = 5\n");
        assert_eq!(got_meta.get(META_VERSION).unwrap(), CHECKPOINT_VERSION);
        assert_eq!(loaded.names(), ps.names());
        for name in ps.names() {
            let a: Vec<f32> = ps.get(&name).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = loaded.get(&name).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b, "mismatch in {name}");
        }
    }

    #[test]
    fn load_rejects_missing_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        let data = vec![0f32; 4];
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let view = TensorView::new(Dtype::F32, vec![4], &bytes).unwrap();
        safetensors::serialize_to_file(vec![("x", view)], None, &path).unwrap();
        let err = ParamStore::load(&path, 0, dev()).err().unwrap();
        assert!(format!("{err}").contains("version"));
    }

    #[test]
    fn copy_prefix_moves_values() {
        let mut ps = ParamStore::new(2, dev());
        ps.var("src.a", &[4], Init::Normal { std: 1.0 }).unwrap();
        ps.var("src.b", &[2, 2], Init::Normal { std: 1.0 }).unwrap();
        ps.var("dst.a", &[4], Init::Const(0.0)).unwrap();
        ps.var("dst.b", &[2, 2], Init::Const(0.0)).unwrap();
        let n = ps.copy_prefix("src", "dst").unwrap();
        assert_eq!(n, 2);
        let a: Vec<f32> = ps.get("src.a").unwrap().to_vec1().unwrap();
        let b: Vec<f32> = ps.get("dst.a").unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        assert!(ps.copy_prefix("nope", "dst").is_err());
    }

    #[test]
    fn prefix_filter_selects_subset() {
        let mut ps = ParamStore::new(2, dev());
        ps.var("enc.w", &[2], Init::Const(1.0)).unwrap();
        ps.var("dec.w", &[2], Init::Const(1.0)).unwrap();
        ps.var("enc.b", &[2], Init::Const(1.0)).unwrap();
        assert_eq!(ps.vars_with_prefix(&["enc"]).len(), 2);
        assert_eq!(ps.vars_with_prefix(&["enc", "dec"]).len(), 3);
        assert_eq!(ps.vars_with_prefix(&["none"]).len(), 0);
    }

    #[test]
    fn randn_reproducible() {
        let mut r1 = ChaCha12Rng::seed_from_u64(11);
        let mut r2 = ChaCha12Rng::seed_from_u64(11);
        let a: Vec<f32> = randn(&mut r1, &[8], &dev()).unwrap().to_vec1().unwrap();
        let b: Vec<f32> = randn(&mut r2, &[8], &dev()).unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_bounds_respected() {
        let mut r = ChaCha12Rng::seed_from_u64(3);
        let t = rand_uniform(&mut r, -0.5, 0.5, &[1024], &dev()).unwrap();
        let v: Vec<f32> = t.to_vec1().unwrap();
        assert!(v.iter().all(|x| (-0.5..0.5).contains(x)));
    }
}
