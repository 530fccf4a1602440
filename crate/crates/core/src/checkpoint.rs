//! Versioned binary parameter files.
//!
//! Layout: the magic bytes `MCLP`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, then every tensor's
//! values as little-endian `f64` in header order. The header records the
//! model kind, a configuration fingerprint, free-form metadata and the name
//! and shape of each tensor. Serialization is deterministic, so equal
//! parameters and metadata give equal bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"MCLP";
pub const VERSION: u32 = 1;

/// Hex SHA-256 of the compact JSON serialization of `config`.
pub fn fingerprint<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    sha256_hex(&json)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    fingerprint: String,
    metadata: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub fingerprint: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    /// Captures every parameter of `store` whose name starts with one of `prefixes`
    /// (all parameters when `prefixes` is empty), in registration order.
    pub fn from_store(
        kind: &str,
        fingerprint: String,
        metadata: serde_json::Value,
        store: &ParamStore,
        prefixes: &[&str],
    ) -> Self {
        let tensors = store
            .entries()
            .iter()
            .filter(|e| prefixes.is_empty() || prefixes.iter().any(|p| e.name.starts_with(p)))
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        Self {
            kind: kind.into(),
            fingerprint,
            metadata,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Mat> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Copies tensors whose names start with `prefix` into `store`. Every
    /// such store parameter must be present with a matching shape. Returns
    /// the number of tensors copied.
    pub fn load_into(&self, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        let wanted: Vec<String> = store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.name.clone())
            .collect();
        for name in wanted {
            let src = self
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let id = store.id(&name).expect("name taken from the store");
            let dst = store.get_mut(id);
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
            copied += 1;
        }
        Ok(copied)
    }

    pub fn verify(&self, kind: &str, fingerprint: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        if self.fingerprint != fingerprint {
            return Err(Error::Checkpoint(format!(
                "config fingerprint mismatch: checkpoint {}, config {}",
                self.fingerprint, fingerprint
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            fingerprint: self.fingerprint.clone(),
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorInfo {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let n: usize = self.tensors.iter().map(|(_, m)| m.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + n * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &self.tensors {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated header"))?;
        let hbytes = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(hbytes).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut data = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in header.tensors {
            let n = info.rows * info.cols;
            let chunk = data
                .get(..n * 8)
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", info.name)))?;
            let values = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((info.name, Mat::from_vec(info.rows, info.cols, values)));
            data = &data[n * 8..];
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            kind: header.kind,
            fingerprint: header.fingerprint,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
