use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ChannelAttention, ModelConfig};
use super::tensor::Tensor;
use crate::error::{Result, SeldError};
use crate::scalar::Scalar;
use crate::seldt::SeldtTensor;

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(3 / fan_in)`, unit-variance preserving for linear maps.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Default)]
struct Specs(Vec<ParamSpec>);

impl Specs {
    fn add(&mut self, name: String, dims: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, dims, init });
    }

    fn conv(&mut self, p: &str, c_out: usize, c_in_per_group: usize, k: usize, bias: bool) {
        let fan_in = c_in_per_group * k * k;
        self.add(format!("{p}.w"), vec![c_out, c_in_per_group, k, k], Init::Uniform { fan_in });
        if bias {
            self.add(format!("{p}.b"), vec![c_out], Init::Zeros);
        }
    }

    fn linear(&mut self, p: &str, d_out: usize, d_in: usize) {
        self.add(format!("{p}.w"), vec![d_out, d_in], Init::Uniform { fan_in: d_in });
        self.add(format!("{p}.b"), vec![d_out], Init::Zeros);
    }

    fn norm(&mut self, p: &str, c: usize) {
        self.add(format!("{p}.gamma"), vec![c], Init::Ones);
        self.add(format!("{p}.beta"), vec![c], Init::Zeros);
    }

    fn attention(&mut self, p: &str, d: usize) {
        self.norm(&format!("{p}.ln"), d);
        for proj in ["q", "k", "v", "o"] {
            self.linear(&format!("{p}.attn.{proj}"), d, d);
        }
    }

    fn scconv(&mut self, p: &str, cfg: &ModelConfig) {
        let e = cfg.embed_ch;
        let (up, low) = (cfg.cru_upper(), e - cfg.cru_upper());
        let r = cfg.cru_squeeze_ratio;
        let (up_sq, low_sq) = (up / r, low / r);
        self.norm(&format!("{p}.sru.gn"), e);
        self.add(format!("{p}.sru.scale"), vec![1], Init::Ones);
        self.conv(&format!("{p}.cru.squeeze_up"), up_sq, up, 1, false);
        self.conv(&format!("{p}.cru.squeeze_low"), low_sq, low, 1, false);
        self.conv(&format!("{p}.cru.gwc"), e, cfg.cru_group_size, 3, false);
        self.conv(&format!("{p}.cru.pwc1"), e, up_sq, 1, false);
        self.conv(&format!("{p}.cru.pwc2"), e - low_sq, low_sq, 1, false);
    }
}

/// Every parameter of the network in forward order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let e = cfg.embed_ch;
    let mut s = Specs::default();
    for i in 0..4 {
        let c_in = if i == 0 { cfg.in_ch } else { e };
        s.conv(&format!("stem.{i}.conv"), e, c_in, 3, true);
        s.norm(&format!("stem.{i}.gn"), e);
    }
    for b in 0..cfg.n_blocks {
        let p = format!("block{b}");
        if cfg.use_scconv {
            s.scconv(&format!("{p}.scconv_pre"), cfg);
        }
        match cfg.channel_attention {
            ChannelAttention::Ule => {
                let area = cfg.ule_patch.0 * cfg.ule_patch.1;
                s.norm(&format!("{p}.chan.ln"), e);
                s.linear(&format!("{p}.chan.proj_in"), cfg.ule_dim, area);
                for proj in ["q", "k", "v", "o"] {
                    s.linear(&format!("{p}.chan.attn.{proj}"), cfg.ule_dim, cfg.ule_dim);
                }
                s.linear(&format!("{p}.chan.proj_out"), area, cfg.ule_dim);
            }
            ChannelAttention::Dca => s.attention(&format!("{p}.chan"), cfg.f_embed()),
        }
        s.attention(&format!("{p}.spec"), e);
        s.attention(&format!("{p}.temp"), e);
        if cfg.use_scconv {
            s.scconv(&format!("{p}.scconv_post"), cfg);
        }
    }
    s.linear("head.fc1", cfg.fnn_size, cfg.f_embed() * e);
    s.linear("head.fc2", cfg.output_width(), cfg.fnn_size);
    s.0
}

/// Number of trainable scalars, from the configuration alone.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    offset: usize,
    shape: Vec<usize>,
}

/// Sidecar index path of a checkpoint.
pub fn checkpoint_index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".index.json");
    PathBuf::from(s)
}

impl<T: Scalar> ParamStore<T> {
    /// Seeded initialisation.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        for spec in param_specs(cfg) {
            let n = spec.numel();
            let data: Vec<T> = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Uniform { fan_in } => {
                    let bound = (3.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect()
                }
            };
            params.insert(spec.name, Tensor::new(spec.dims, data)?);
        }
        Ok(Self { params })
    }

    /// Same names and shapes, all zero.
    pub fn zeros_like(&self) -> Self {
        Self { params: self.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.dims()))).collect() }
    }

    pub fn from_tensors(params: IndexMap<String, Tensor<T>>) -> Self {
        Self { params }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Read the scalar at a global flat position (store order).
    pub fn flat_get(&self, mut idx: usize) -> Option<T> {
        for t in self.params.values() {
            if idx < t.numel() {
                return Some(t.data()[idx]);
            }
            idx -= t.numel();
        }
        None
    }

    pub fn flat_set(&mut self, mut idx: usize, v: T) -> bool {
        for t in self.params.values_mut() {
            if idx < t.numel() {
                t.data_mut()[idx] = v;
                return true;
            }
            idx -= t.numel();
        }
        false
    }

    /// `self += scale·other` over matching names.
    pub fn axpy(&mut self, scale: T, other: &Self) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let o = other.params.get(name).ok_or_else(|| SeldError::Domain(format!("missing parameter {name}")))?;
            if o.dims() != t.dims() {
                return Err(SeldError::Shape { expected: t.dims().to_vec(), got: o.dims().to_vec() });
            }
            t.data_mut().iter_mut().zip(o.data()).for_each(|(a, &b)| *a += scale * b);
        }
        Ok(())
    }

    /// Set every parameter whose name contains `pattern` to zero.
    pub fn zero_matching(&mut self, pattern: &str) {
        for (name, t) in self.params.iter_mut() {
            if name.contains(pattern) {
                t.data_mut().fill(T::zero());
            }
        }
    }

    /// Check names and shapes against a configuration.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        if specs.len() != self.params.len() {
            return Err(SeldError::Format(format!(
                "checkpoint has {} tensors, configuration expects {}",
                self.params.len(),
                specs.len()
            )));
        }
        for spec in specs {
            match self.params.get(&spec.name) {
                None => return Err(SeldError::Format(format!("checkpoint lacks {}", spec.name))),
                Some(t) if t.dims() != spec.dims.as_slice() => {
                    return Err(SeldError::Shape { expected: spec.dims, got: t.dims().to_vec() })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Write all parameters as one flat SELDT tensor plus a JSON index of
    /// `name → {offset, shape}`.
    pub fn write_checkpoint<W: Write, I: Write>(&self, data: W, index: I) -> Result<()> {
        let mut flat = Vec::with_capacity(self.numel());
        let mut entries = IndexMap::new();
        for (name, t) in &self.params {
            entries.insert(name.clone(), IndexEntry { offset: flat.len(), shape: t.dims().to_vec() });
            flat.extend(t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)));
        }
        SeldtTensor::new(vec![flat.len()], flat)?.write_to(data)?;
        serde_json::to_writer_pretty(index, &entries)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read, I: Read>(data: R, index: I) -> Result<Self> {
        let flat = SeldtTensor::read_from(data)?;
        let entries: IndexMap<String, IndexEntry> = serde_json::from_reader(index)?;
        let mut params = IndexMap::new();
        for (name, e) in entries {
            let n: usize = e.shape.iter().product();
            let slice = flat
                .data
                .get(e.offset..e.offset + n)
                .ok_or_else(|| SeldError::Format(format!("parameter {name} runs past the end of the archive")))?;
            let t = Tensor::new(e.shape, slice.iter().map(|&v| T::lit(v as f64)).collect())?;
            params.insert(name, t);
        }
        Ok(Self { params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let data = std::io::BufWriter::new(std::fs::File::create(path)?);
        let index = std::io::BufWriter::new(std::fs::File::create(checkpoint_index_path(path))?);
        self.write_checkpoint(data, index)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let data = std::io::BufReader::new(std::fs::File::open(path)?);
        let index = std::io::BufReader::new(std::fs::File::open(checkpoint_index_path(path))?);
        Self::read_checkpoint(data, index)
    }
}
