//! Checkpoint container: an 8-byte magic, a little-endian `u32` version, a
//! little-endian `u64` manifest length, the JSON manifest, then every tensor
//! as raw little-endian `f32` values in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Module, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VCICKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("tensor `{0}` missing from checkpoint")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    seed: u64,
    epoch: u64,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub epoch: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<(TensorEntry, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, epoch: u64, config: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            seed,
            epoch,
            config,
            tensors: Vec::new(),
        }
    }

    /// Appends every parameter of `module`, names prefixed by `prefix`.
    pub fn push_module<R: Real>(&mut self, prefix: &str, module: &impl Module<R>) {
        for (name, t) in module.named_parameters() {
            self.tensors.push((
                TensorEntry {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                },
                t.data().iter().map(|v| v.f64() as f32).collect(),
            ));
        }
    }

    /// Overwrites `module`'s parameters from entries named `prefix + name`.
    pub fn load_module<R: Real>(&self, prefix: &str, module: &mut impl Module<R>) -> Result<(), CheckpointError> {
        let names: Vec<(String, Vec<usize>)> = module
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (format!("{prefix}{n}"), t.shape().to_vec()))
            .collect();
        for ((name, shape), p) in names.into_iter().zip(module.parameters_mut()) {
            let (entry, data) = self
                .tensors
                .iter()
                .find(|(e, _)| e.name == name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if entry.shape != shape {
                return Err(CheckpointError::Shape {
                    name,
                    expected: shape,
                    found: entry.shape.clone(),
                });
            }
            for (dst, &src) in p.data_mut().iter_mut().zip(data) {
                *dst = R::of(src as f64);
            }
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(e, _)| e.name == name)
            .and_then(|(e, d)| Tensor::new(e.shape.clone(), d.clone()).ok())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            seed: self.seed,
            epoch: self.epoch,
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let payload: usize = self.tensors.iter().map(|(_, d)| d.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, d) in &self.tensors {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < mlen {
            return Err(CheckpointError::Truncated {
                expected: mlen,
                found: body.len(),
            });
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])?;
        let payload = &body[mlen..];
        let expected: usize = manifest
            .tensors
            .iter()
            .map(|e| e.shape.iter().product::<usize>() * 4)
            .sum();
        if payload.len() != expected {
            return Err(CheckpointError::Truncated {
                expected,
                found: payload.len(),
            });
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let data = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset += 4 * n;
            tensors.push((e, data));
        }
        Ok(Self {
            kind: manifest.kind,
            seed: manifest.seed,
            epoch: manifest.epoch,
            config: manifest.config,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Activation, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn module_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::<f32>::new(&[4, 6, 2], Activation::Relu, Activation::Identity, &mut rng);
        let mut ck = Checkpoint::new("mlp", 3, 7, serde_json::json!({"dims": [4, 6, 2]}));
        ck.push_module("enc.", &mlp);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let mut other = Mlp::<f32>::new(&[4, 6, 2], Activation::Relu, Activation::Identity, &mut rng);
        assert_ne!(other, mlp);
        back.load_module("enc.", &mut other).unwrap();
        assert_eq!(other, mlp);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(CheckpointError::BadMagic)));
        let mut ck = Checkpoint::new("x", 0, 0, serde_json::Value::Null);
        ck.tensors.push((
            TensorEntry {
                name: "a".into(),
                shape: vec![3],
            },
            vec![1.0, 2.0, 3.0],
        ));
        let bytes = ck.to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 2];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(CheckpointError::Truncated { .. })));
    }

    #[test]
    fn shape_mismatch_on_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::<f32>::new(&[4, 2], Activation::Relu, Activation::Identity, &mut rng);
        let mut ck = Checkpoint::new("mlp", 0, 0, serde_json::Value::Null);
        ck.push_module("", &mlp);
        let mut wrong = Mlp::<f32>::new(&[5, 2], Activation::Relu, Activation::Identity, &mut rng);
        assert!(matches!(ck.load_module("", &mut wrong), Err(CheckpointError::Shape { .. })));
    }
}
