//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `FMITCKPT`, a little-endian `u64` manifest
//! length, the manifest as UTF-8 JSON, then every parameter's values as raw
//! little-endian floats, concatenated in manifest order. The manifest holds
//! the format version, precision, parameter names and shapes, and free-form
//! metadata (model configuration and vocabularies).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Precision, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"FMITCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub precision: Precision,
    pub params: Vec<ParamEntry>,
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub metadata: serde_json::Value,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            precision: T::PRECISION,
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_vec(&manifest)?;
        let width = T::PRECISION.byte_width();
        let mut out = Vec::with_capacity(16 + header.len() + self.params.num_scalars() * width);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let manifest = read_manifest(bytes)?;
        if manifest.precision != T::PRECISION {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} values, requested {}",
                manifest.precision,
                T::PRECISION
            )));
        }
        let width = T::PRECISION.byte_width();
        let mut off = 16 + manifest_len(bytes)?;
        let mut params = ParamStore::new();
        for entry in &manifest.params {
            let n: usize = entry.shape.iter().product();
            let end = off + n * width;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("payload truncated inside `{}`", entry.name)));
            }
            let data = bytes[off..end].chunks_exact(width).map(T::read_le).collect();
            params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
            off = end;
        }
        if off != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after payload",
                bytes.len() - off
            )));
        }
        Ok(Self {
            params,
            metadata: manifest.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn manifest_len(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing FMITCKPT magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if 16 + len > bytes.len() {
        return Err(Error::Checkpoint("manifest truncated".into()));
    }
    Ok(len)
}

pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    let len = manifest_len(bytes)?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + len])?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Reads only the manifest of a checkpoint file.
pub fn peek(path: impl AsRef<Path>) -> Result<Manifest> {
    read_manifest(&fs::read(path)?)
}
