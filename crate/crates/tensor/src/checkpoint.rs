//! Checkpoint directory layout: `manifest.json` describing every tensor
//! (name, shape, byte offset) and `params.bin` holding the little-endian
//! values back to back in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: DType,
    pub config_hash: String,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn save<T: Element>(
    dir: &Path,
    tensors: &[(String, &Tensor<T>)],
    config_hash: &str,
    step: u64,
    metadata: serde_json::Value,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let width = T::DTYPE.size_in_bytes() as u64;
    let mut bin = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = bin.len() as u64;
        for &v in t.data() {
            v.write_le(&mut bin);
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            nbytes: t.len() as u64 * width,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        config_hash: config_hash.to_string(),
        step,
        tensors: entries,
        metadata,
    };
    fs::write(dir.join(PARAMS_FILE), &bin)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| TensorError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

fn decode<T: Element, S: Element>(bytes: &[u8]) -> Vec<T> {
    let w = S::DTYPE.size_in_bytes();
    bytes.chunks_exact(w).map(|c| T::of(S::read_le(c).as_f64())).collect()
}

/// Loads every tensor, converting from the stored precision to `T`.
pub fn load<T: Element>(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor<T>)>)> {
    let manifest = load_manifest(dir)?;
    let bin = fs::read(dir.join(PARAMS_FILE))?;
    let width = manifest.dtype.size_in_bytes() as u64;
    let expected: u64 = manifest.tensors.iter().map(|e| e.nbytes).sum();
    if bin.len() as u64 != expected {
        return Err(TensorError::Checkpoint(format!(
            "{PARAMS_FILE} holds {} bytes, manifest describes {expected}",
            bin.len()
        )));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let count: u64 = e.shape.iter().map(|&d| d as u64).product();
        if count * width != e.nbytes || e.offset + e.nbytes > bin.len() as u64 {
            return Err(TensorError::Checkpoint(format!("inconsistent entry for {}", e.name)));
        }
        let bytes = &bin[e.offset as usize..(e.offset + e.nbytes) as usize];
        let data = match manifest.dtype {
            DType::F32 => decode::<T, f32>(bytes),
            DType::F64 => decode::<T, f64>(bytes),
        };
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((manifest, out))
}
