//! Named trainable parameters with seeded, order-independent initialization.
//!
//! Every parameter lives under a dotted path (`backbone.stage1.weight`,
//! `udcm.difficulty`, ...). Initial values are drawn from a generator seeded
//! by `(store seed, path)`, so building modules in a different order yields
//! the same weights. Checkpoints are a flat safetensors map path → tensor
//! plus a plain-text manifest of shapes.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "params.manifest.txt";
pub const TENSORS_FILE: &str = "params.safetensors";

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual dense/conv default.
    FanIn(usize),
    Normal(f64),
    Values(Vec<f64>),
}

/// Stable 64-bit digest of arbitrary bytes.
pub fn digest_u64(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 has 32 bytes"))
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            seed,
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Creates a new parameter. Paths must be unique.
    pub fn var(&mut self, path: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.vars.contains_key(path) {
            return Err(Error::config(format!("duplicate parameter path `{path}`")));
        }
        let numel: usize = shape.iter().product();
        let mut rng =
            ChaCha8Rng::seed_from_u64(digest_u64(&[&self.seed.to_le_bytes(), path.as_bytes()]));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Const(c) => vec![c; numel],
            Init::Uniform(b) => (0..numel).map(|_| rng.random_range(-b..=b)).collect(),
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..numel).map(|_| rng.random_range(-b..=b)).collect()
            }
            Init::Normal(std) => {
                let normal = rand_distr::Normal::new(0.0, std)
                    .map_err(|e| Error::config(format!("bad init std for `{path}`: {e}")))?;
                (0..numel).map(|_| rng.sample(normal)).collect()
            }
            Init::Values(v) => {
                if v.len() != numel {
                    return Err(Error::config(format!(
                        "`{path}` expects {numel} initial values, got {}",
                        v.len()
                    )));
                }
                v
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(path.to_string(), var.clone());
        Ok(var)
    }

    pub fn get(&self, path: &str) -> Option<&Var> {
        self.vars.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Deep copy of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (path, var) in &self.vars {
            let t = values
                .get(path)
                .ok_or_else(|| Error::data(format!("checkpoint is missing parameter `{path}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::data(format!(
                    "parameter `{path}` has shape {:?} in checkpoint, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Hex SHA-256 over paths, shapes and raw values.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (path, var) in &self.vars {
            hasher.update(path.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let flat = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?;
            for x in flat.to_vec1::<f64>()? {
                hasher.update(x.to_le_bytes());
            }
        }
        Ok(format!("{:x}", hasher.finalize()))
    }

    pub fn shape_manifest(&self) -> String {
        let mut out = String::new();
        for (path, var) in &self.vars {
            let dims: Vec<String> = var.dims().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "{path}\t{}", dims.join("x"));
        }
        out
    }

    /// Writes `params.safetensors` and `params.manifest.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, dir.join(TENSORS_FILE))?;
        std::fs::write(dir.join(MANIFEST_FILE), self.shape_manifest())?;
        Ok(())
    }

    pub fn load(&self, dir: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(dir.join(TENSORS_FILE), &self.device)?;
        let values: BTreeMap<String, Tensor> = loaded.into_iter().collect();
        self.restore(&values)
    }
}

/// Parses a manifest produced by [`ParamStore::shape_manifest`].
pub fn parse_shape_manifest(text: &str) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (path, dims) = line
            .split_once('\t')
            .ok_or_else(|| Error::data(format!("manifest line {} has no tab", lineno + 1)))?;
        let dims = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split('x')
                .map(|d| {
                    d.parse::<usize>().map_err(|_| {
                        Error::data(format!("manifest line {}: bad dimension `{d}`", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?
        };
        out.insert(path.to_string(), dims);
    }
    Ok(out)
}
