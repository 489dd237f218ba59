use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes through `serde_json::Value`, whose maps are key-sorted, so equal
/// values always produce equal text.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(canonical_json(value)?.as_bytes()))
}

/// Writes via a temporary sibling then renames, so readers never see a partial file.
pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!(
        "tmp.{}.{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0)
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_bytes_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Named f32 arrays with their shapes.
pub type F32Arrays = std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Writes f32 arrays as a safetensors file with string metadata.
pub fn write_f32_arrays(
    path: &Path,
    arrays: &F32Arrays,
    metadata: std::collections::HashMap<String, String>,
) -> Result<()> {
    let blobs: Vec<(&String, &Vec<usize>, Vec<u8>)> = arrays
        .iter()
        .map(|(n, (shape, vals))| {
            (
                n,
                shape,
                vals.iter().flat_map(|v| v.to_le_bytes()).collect(),
            )
        })
        .collect();
    let views = blobs
        .iter()
        .map(|(n, shape, bytes)| {
            safetensors::tensor::TensorView::new(safetensors::Dtype::F32, (*shape).clone(), bytes)
                .map(|v| ((*n).clone(), v))
                .map_err(|e| Error::Validation(format!("array `{n}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, Some(metadata))
        .map_err(|e| Error::Validation(format!("array serialization: {e}")))?;
    write_bytes_atomic(path, &bytes)
}

pub fn read_f32_arrays(
    path: &Path,
) -> Result<(F32Arrays, std::collections::HashMap<String, String>)> {
    let bytes = fs::read(path).map_err(|e| Error::ingestion(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::ingestion(path, format!("invalid array file: {e}")))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let st = safetensors::SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::ingestion(path, format!("invalid array file: {e}")))?;
    let mut out = F32Arrays::new();
    for (name, view) in st.tensors() {
        if view.dtype() != safetensors::Dtype::F32 {
            return Err(Error::ingestion(path, format!("array `{name}` is not f32")));
        }
        let vals = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(name, (view.shape().to_vec(), vals));
    }
    Ok((out, meta))
}
