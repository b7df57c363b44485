use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::{BnBatchStats, BN_MOMENTUM};
use crate::tensor::{numel, ConvSpec, Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// N(0, 2 / fan_in)
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
    pub slot: Slot,
}

/// Ordered list of parameter and buffer declarations, built with the same
/// scoping rules as [`crate::graph::Graph`] so names line up with lookups.
#[derive(Debug, Default, Clone)]
pub struct ParamDecls {
    entries: Vec<ParamDecl>,
    scope: Vec<String>,
}

impl ParamDecls {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.into());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn path(&self, local: &str) -> String {
        let mut p = self.scope.join(".");
        if !p.is_empty() {
            p.push('.');
        }
        p.push_str(local);
        p
    }

    pub fn add(&mut self, local: &str, shape: Shape, init: Init, slot: Slot) {
        let name = self.path(local);
        self.entries.push(ParamDecl {
            name,
            shape,
            init,
            slot,
        });
    }

    /// `weight` (+ `bias`) for a convolution in the current scope.
    pub fn conv(&mut self, spec: &ConvSpec) {
        let ws = spec.weight_shape();
        self.add("weight", ws, Init::HeNormal { fan_in: ws[1] * ws[2] * ws[3] }, Slot::Param);
        if spec.has_bias {
            self.add("bias", [spec.out_channels, 1, 1, 1], Init::Zeros, Slot::Param);
        }
    }

    /// `gamma`, `beta` and the two running-statistic buffers.
    pub fn batch_norm(&mut self, channels: usize) {
        let s = [channels, 1, 1, 1];
        self.add("gamma", s, Init::Ones, Slot::Param);
        self.add("beta", s, Init::Zeros, Slot::Param);
        self.add("running_mean", s, Init::Zeros, Slot::Buffer);
        self.add("running_var", s, Init::Ones, Slot::Buffer);
    }

    pub fn entries(&self) -> &[ParamDecl] {
        &self.entries
    }
}

/// Named parameter tensors plus non-trainable buffers, addressable by block path.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<T: Scalar> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    /// Initializes every declaration in order from a ChaCha stream seeded by `seed`.
    pub fn from_decls(decls: &ParamDecls, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Self::new();
        for d in decls.entries() {
            let t = match d.init {
                Init::Zeros => Tensor::zeros(d.shape),
                Init::Ones => Tensor::full(d.shape, T::one()),
                Init::HeNormal { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt())
                        .map_err(|e| Error::config(e.to_string()))?;
                    let data = (0..numel(d.shape))
                        .map(|_| T::of(normal.sample(&mut rng)))
                        .collect();
                    Tensor::new(d.shape, data)?
                }
            };
            let map = match d.slot {
                Slot::Param => &mut out.params,
                Slot::Buffer => &mut out.buffers,
            };
            if map.insert(d.name.clone(), t).is_some() {
                return Err(Error::config(format!("duplicate parameter name `{}`", d.name)));
            }
        }
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffers.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.buffers.insert(name.into(), t);
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// SHA-256 over names, shapes and little-endian payloads of params and buffers.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (tag, map) in [("p", &self.params), ("b", &self.buffers)] {
            for (name, t) in map {
                h.update(tag.as_bytes());
                h.update(name.as_bytes());
                for d in t.shape() {
                    h.update((d as u64).to_le_bytes());
                }
                buf.clear();
                t.data().iter().for_each(|v| v.write_le(&mut buf));
                h.update(&buf);
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Folds batch statistics into the running buffers `<prefix>.running_*`.
    pub fn apply_stat_updates(&mut self, updates: &[(String, BnBatchStats<T>)]) -> Result<()> {
        let m = T::of(BN_MOMENTUM);
        for (prefix, stats) in updates {
            for (suffix, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let name = format!("{prefix}.{suffix}");
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| Error::config(format!("missing buffer `{name}`")))?;
                for (r, v) in buf.data_mut().iter_mut().zip(values) {
                    *r = (T::one() - m) * *r + m * *v;
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decls() -> ParamDecls {
        let mut d = ParamDecls::new();
        d.scoped("blk", |d| {
            d.scoped("conv", |d| d.conv(&ConvSpec::new(4, 8, 3).bias(true)));
            d.scoped("bn", |d| d.batch_norm(8));
        });
        d
    }

    #[test]
    fn init_is_deterministic_and_named() {
        let a = ModelParams::<f32>::from_decls(&decls(), 7).unwrap();
        let b = ModelParams::<f32>::from_decls(&decls(), 7).unwrap();
        let c = ModelParams::<f32>::from_decls(&decls(), 8).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a.get("blk.conv.weight").unwrap().shape(), [8, 4, 3, 3]);
        assert!(a.get("blk.conv.bias").unwrap().data().iter().all(|v| *v == 0.0));
        assert!(a.get("blk.bn.gamma").unwrap().data().iter().all(|v| *v == 1.0));
        assert!(a.buffer("blk.bn.running_var").is_some());
        assert_eq!(a.num_params(), 8 * 4 * 9 + 8 + 16);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut d = decls();
        d.scoped("blk", |d| d.scoped("bn", |d| d.batch_norm(8)));
        assert!(ModelParams::<f64>::from_decls(&d, 0).is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut p = ModelParams::<f64>::from_decls(&decls(), 0).unwrap();
        let upd = vec![(
            "blk.bn".to_string(),
            BnBatchStats {
                mean: vec![1.0; 8],
                var: vec![3.0; 8],
            },
        )];
        p.apply_stat_updates(&upd).unwrap();
        assert!((p.buffer("blk.bn.running_mean").unwrap().data()[0] - 0.1).abs() < 1e-12);
        assert!((p.buffer("blk.bn.running_var").unwrap().data()[0] - 1.2).abs() < 1e-12);
    }
}
