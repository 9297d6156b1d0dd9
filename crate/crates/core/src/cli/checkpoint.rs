//! Binary checkpoint format:
//!
//! ```text
//! "SPIE" | version: u32 LE | manifest length: u64 LE | manifest (UTF-8 JSON) | f64 LE blobs
//! ```
//!
//! The manifest holds the run configuration, the step counter and a table
//! of tensor names, shapes and byte offsets into the blob section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"SPIE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: RunConfig,
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    offset: u64,
}

fn corrupt(offset: usize, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        offset: offset as u64,
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            config: self.config.clone(),
            step: self.step,
            tensors,
        })
        .expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(bytes.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(4, format!("version {version} found, this build reads version {VERSION}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let blob_start = usize::try_from(mlen)
            .ok()
            .and_then(|m| m.checked_add(HEADER_LEN))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt(8, format!("manifest length {mlen} exceeds file size {}", bytes.len())))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..blob_start])
            .map_err(|e| corrupt(HEADER_LEN, format!("manifest: {e}")))?;
        let blobs = &bytes[blob_start..];
        let mut params = ParamStore::new();
        let mut expected = 0u64;
        for e in &manifest.tensors {
            if e.offset != expected {
                return Err(corrupt(
                    blob_start,
                    format!("tensor {} at offset {} but previous data ends at {expected}", e.name, e.offset),
                ));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > blobs.len() {
                return Err(corrupt(
                    blob_start + blobs.len(),
                    format!("truncated data for tensor {} (needs {end} bytes, have {})", e.name, blobs.len()),
                ));
            }
            let data = blobs[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| corrupt(blob_start + start, err.to_string()))?;
            params
                .insert(e.name.clone(), t)
                .map_err(|err| corrupt(HEADER_LEN, err.to_string()))?;
            expected = end as u64;
        }
        if expected as usize != blobs.len() {
            return Err(corrupt(
                blob_start + expected as usize,
                format!("{} trailing bytes after the last tensor", blobs.len() - expected as usize),
            ));
        }
        manifest
            .config
            .validate()
            .map_err(|e| corrupt(HEADER_LEN, format!("embedded config: {e}")))?;
        Ok(Self {
            config: manifest.config,
            step: manifest.step,
            params,
        })
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::NoiseModel;

    fn sample() -> Checkpoint {
        let config = RunConfig::default();
        let params = config.model().unwrap().init_params(3);
        Checkpoint { config, step: 12, params }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"SPIE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        for ((_, a), (_, b)) in back.params.iter().zip(c.params.iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = sample();
        save_checkpoint(&path, &c).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), c);
        assert!(matches!(load_checkpoint(&dir.path().join("missing.ckpt")), Err(Error::Io { .. })));
    }

    #[test]
    fn truncation_rejected_everywhere() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 10, 16, 40, bytes.len() - 8, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_version_and_trailing_bytes() {
        let mut bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&7u32.to_le_bytes());
        let msg = Checkpoint::from_bytes(&bad).unwrap_err().to_string();
        assert!(msg.contains("version 7") && msg.contains(&format!("version {VERSION}")), "{msg}");
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("trailing"));
    }
}
