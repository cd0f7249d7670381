//! Parameter checkpoints.
//!
//! Layout: the 8-byte magic `PAMPOSE1`, a little-endian `u64` giving the
//! length of a UTF-8 JSON manifest, the manifest, then every tensor as
//! little-endian `f64` values. The manifest lists each tensor's name,
//! shape and byte offset into the data section, plus the run configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"PAMPOSE1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: Value,
    tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Whatever configuration the writer wants to travel with the weights.
    pub config: Value,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            config: self.config.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("missing PAMPOSE1 header (wrong file or version)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("manifest runs past the end of the file".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])?;
        let data = &bytes[data_start..];
        let mut params = ParamSet::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > data.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` runs past the end of the file", e.name)));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?);
        }
        Ok(Self {
            config: manifest.config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::random_tensor;

    fn sample() -> Checkpoint {
        let mut params = ParamSet::new();
        params.insert("a.w", random_tensor(&[3, 4], 1.0, 1));
        params.insert("a.b", random_tensor(&[3], 1.0, 2));
        params.insert("s", Tensor::scalar(f64::MIN_POSITIVE));
        Checkpoint {
            config: serde_json::json!({"seed": 42, "pam.reduction_ratio": 16}),
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let names: Vec<_> = Checkpoint::load(&path).unwrap().params.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["a.w", "a.b", "s"]);
    }

    #[test]
    fn manifest_offsets() {
        let bytes = sample().to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let m: Manifest = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        let offsets: Vec<u64> = m.tensors.iter().map(|e| e.offset).collect();
        assert_eq!(offsets, [0, 96, 120]);
        assert_eq!(bytes.len(), 16 + len + 128);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"PAMPOSE0xxxxxxxx"), Err(Error::Checkpoint(_))));
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }
}
