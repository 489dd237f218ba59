use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named trainable parameters plus non-trainable buffers (BatchNorm running stats).
///
/// Keys are ordered, which keeps optimizer state, checkpoints and hashes stable.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn trainable(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys().chain(self.buffers.keys())
    }

    /// Snapshot of every tensor, trainable and buffer, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, v) in self.params.iter().chain(self.buffers.iter()) {
            out.insert(k.clone(), v.as_tensor().copy()?);
        }
        Ok(out)
    }

    pub fn restore(&self, snap: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in self.params.iter().chain(self.buffers.iter()) {
            let t = snap
                .get(k)
                .ok_or_else(|| Error::Validation(format!("snapshot is missing tensor `{k}`")))?;
            if t.dims() != v.dims() {
                return Err(Error::Validation(format!(
                    "tensor `{k}` has shape {:?}, expected {:?}",
                    t.dims(),
                    v.dims()
                )));
            }
            v.set(t)?;
        }
        if let Some(extra) = snap
            .keys()
            .find(|k| !self.params.contains_key(*k) && !self.buffers.contains_key(*k))
        {
            return Err(Error::Validation(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian f32 values.
    pub fn content_hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (k, v) in self.params.iter().chain(self.buffers.iter()) {
            hasher.update(k.as_bytes());
            for d in v.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for x in v.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                hasher.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

/// Creates parameters in a deterministic order from a seeded stream.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    /// Runs `f` with `name` pushed onto the key prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn key(&self, name: &str) -> String {
        let mut k = self.prefix.join(".");
        if !k.is_empty() {
            k.push('.');
        }
        k.push_str(name);
        k
    }

    fn insert(&mut self, name: &str, t: Tensor, buffer: bool) -> Result<Tensor> {
        let key = self.key(name);
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let map = if buffer {
            &mut self.store.buffers
        } else {
            &mut self.store.params
        };
        if map.insert(key.clone(), var).is_some() {
            return Err(Error::Validation(format!("duplicate parameter `{key}`")));
        }
        Ok(out)
    }

    /// U(-bound, bound) parameter.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let vals: Vec<f32> = (0..n)
            .map(|_| self.rng.random_range(-bound..bound) as f32)
            .collect();
        let t = Tensor::from_vec(vals, shape, &Device::Cpu)?;
        self.insert(name, t, false)
    }

    /// Approximate N(0, std²) via Box-Muller.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let vals: Vec<f32> = (0..n)
            .map(|_| {
                let u1: f64 = self.rng.random_range(f64::EPSILON..1.0);
                let u2: f64 = self.rng.random_range(0.0..1.0);
                ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std) as f32
            })
            .collect();
        let t = Tensor::from_vec(vals, shape, &Device::Cpu)?;
        self.insert(name, t, false)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = Tensor::full(value as f32, shape, &Device::Cpu)?;
        self.insert(name, t, false)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let key = self.key(name);
        let t = Tensor::full(value as f32, shape, &Device::Cpu)?.to_dtype(DType::F32)?;
        let var = Var::from_tensor(&t)?;
        if self
            .store
            .buffers
            .insert(key.clone(), var.clone())
            .is_some()
        {
            return Err(Error::Validation(format!("duplicate buffer `{key}`")));
        }
        Ok(var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(seed: u64) -> ParamStore {
        let mut b = ParamBuilder::new(seed);
        b.scoped("a", |b| b.uniform("w", &[4, 3], 0.5)).unwrap();
        b.normal("n", &[7], 1.0).unwrap();
        b.buffer("rm", &[3], 0.0).unwrap();
        b.finish()
    }

    #[test]
    fn same_seed_same_hash() {
        assert_eq!(
            build(3).content_hash().unwrap(),
            build(3).content_hash().unwrap()
        );
        assert_ne!(
            build(3).content_hash().unwrap(),
            build(4).content_hash().unwrap()
        );
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let s = build(1);
        let snap = s.snapshot().unwrap();
        let other = build(2);
        other.restore(&snap).unwrap();
        assert_eq!(s.content_hash().unwrap(), other.content_hash().unwrap());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut b = ParamBuilder::new(0);
        b.uniform("w", &[1], 1.0).unwrap();
        assert!(b.uniform("w", &[1], 1.0).is_err());
    }
}
