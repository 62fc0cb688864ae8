//! Named parameter collections, their on-disk directory layout and content
//! hashing.
//!
//! A parameter directory holds one `.expt` tensor file per parameter plus an
//! `index.json` listing `name -> file -> shape`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{read_tensor, write_tensor, TensorFile};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Input(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn element_count(&self) -> usize {
        self.tensors.values().map(Tensor::elem_count).sum()
    }

    pub fn dtype(&self) -> DType {
        self.tensors.values().next().map_or(DType::F32, Tensor::dtype)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.to_dtype(dtype)?)))
            .collect::<Result<_>>()?;
        Ok(Self { tensors })
    }

    /// Deep copy with fresh storage; the copy shares no buffers with `self`.
    pub fn deep_clone(&self) -> Result<Self> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.copy()?)))
            .collect::<Result<_>>()?;
        Ok(Self { tensors })
    }

    /// Wraps every tensor in a trainable variable. The returned store holds
    /// the variables' tensors, so models built from it see in-place updates.
    pub fn to_vars(&self) -> Result<(Self, VarSet)> {
        let mut vars = VarSet::default();
        let mut store = Self::new();
        for (name, t) in &self.tensors {
            let var = Var::from_tensor(t)?;
            store.insert(name.clone(), var.as_tensor().clone());
            vars.vars.insert(name.clone(), var);
        }
        Ok((store, vars))
    }

    /// Values as f32 in row-major order.
    pub fn values_f32(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self.get(name)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }

    /// SHA-256 over names, shapes and little-endian f32 values, in name order.
    pub fn content_hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, t) in &self.tensors {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((t.rank() as u64).to_le_bytes());
            for d in t.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            let mut bytes = Vec::with_capacity(values.len() * 4);
            values.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
            hasher.update(&bytes);
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let file = format!("{name}.expt");
            let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            let tf = TensorFile::f32(t.dims().to_vec(), values).map_err(|source| Error::Format {
                path: dir.join(&file),
                source,
            })?;
            write_tensor(dir.join(&file), &tf)?;
            index.push(IndexEntry {
                name: name.clone(),
                file,
                shape: t.dims().to_vec(),
            });
        }
        let path = dir.join(INDEX_FILE);
        fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: Vec<IndexEntry> = serde_json::from_str(&text)?;
        let mut store = Self::new();
        for entry in index {
            let tf = read_tensor(dir.join(&entry.file))?;
            if tf.shape() != entry.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter `{}`: index says {:?}, file holds {:?}",
                    entry.name,
                    entry.shape,
                    tf.shape()
                )));
            }
            let values = tf
                .as_f32()
                .ok_or_else(|| Error::Input(format!("parameter `{}` is not f32", entry.name)))?;
            store.insert(entry.name, Tensor::from_slice(values, tf.shape(), &Device::Cpu)?);
        }
        Ok(store)
    }
}

/// Trainable variables keyed by parameter name.
#[derive(Debug, Default)]
pub struct VarSet {
    vars: BTreeMap<String, Var>,
}

impl VarSet {
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Snapshot of the current values as an independent store.
    pub fn snapshot(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, var) in &self.vars {
            store.insert(name.clone(), var.as_tensor().copy()?);
        }
        Ok(store)
    }
}

/// Deterministic parameter initialisation from a seeded stream.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f32> = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound) as f32)
            .collect();
        Ok(Tensor::from_vec(values, shape, &Device::Cpu)?)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let values: Vec<f32> = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        Ok(Tensor::from_vec(values, shape, &Device::Cpu)?)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for a `fan_in x fan_out` matrix.
    pub fn fan_in(&mut self, fan_in: usize, fan_out: usize) -> Result<Tensor> {
        self.uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }
}

pub fn zeros(shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::zeros(shape, DType::F32, &Device::Cpu)?)
}

pub fn ones(shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::ones(shape, DType::F32, &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut init = Initializer::new(7);
        let mut s = ParamStore::new();
        s.insert("a.weight", init.fan_in(4, 3).unwrap());
        s.insert("b", init.normal(&[5], 0.1).unwrap());
        s
    }

    #[test]
    fn save_load_preserves_hash() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        s.save_dir(dir.path()).unwrap();
        let back = ParamStore::load_dir(dir.path()).unwrap();
        assert_eq!(back.content_hash().unwrap(), s.content_hash().unwrap());
        assert_eq!(back.element_count(), 17);
        let index = fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
        assert!(index.contains("\"a.weight.expt\""));
    }

    #[test]
    fn hash_changes_with_any_value() {
        let s = sample();
        let mut t = s.clone();
        let b = t.get("b").unwrap().clone();
        t.insert("b", (b + 1e-3).unwrap());
        assert_ne!(s.content_hash().unwrap(), t.content_hash().unwrap());
    }

    #[test]
    fn initializer_is_deterministic() {
        let a = Initializer::new(3).fan_in(8, 8).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = Initializer::new(3).fan_in(8, 8).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 1.0 / 8f32.sqrt()));
    }
}
