//! Checkpoint layout: `manifest.json` describing every parameter (name,
//! shape, dtype, byte offset) plus `params.f64`, a little-endian blob of all
//! parameter values in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.f64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub blob: String,
    pub params: Vec<ParamEntry>,
    /// Free-form description of whatever owns the parameters.
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Writes `data` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, data)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_f64(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f64(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Checkpoint(format!(
            "blob length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn save(dir: &Path, params: &ParameterSet, metadata: serde_json::Value) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(params.num_scalars() * 8);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let bytes = encode_f64(t.data());
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: blob.len() as u64,
            nbytes: bytes.len() as u64,
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format_version: 1,
        blob: BLOB_FILE.into(),
        params: entries,
        metadata,
    };
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    write_atomic(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<(ParameterSet, Manifest)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let blob = fs::read(dir.join(&manifest.blob))?;
    let mut params = ParameterSet::new();
    for e in &manifest.params {
        if e.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        let start = e.offset as usize;
        let end = start + e.nbytes as usize;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` extends past the end of the blob",
                e.name
            )));
        }
        let data = decode_f64(&blob[start..end])?;
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| {
            Error::Checkpoint(format!("parameter `{}`: {err}", e.name))
        })?;
        params.insert(e.name.clone(), t);
    }
    Ok((params, manifest))
}
