use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{formats, DatasetSpec, DatasetSplit, Standardization};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// Metadata recorded next to every ingested split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetadata {
    pub name: String,
    pub num_examples: usize,
    pub num_classes: usize,
    pub source_seed: u64,
    pub content_sha256: String,
    pub standardization: Standardization,
    pub source_files: Vec<SourceFile>,
}

impl SplitMetadata {
    pub fn describe(split: &DatasetSplit, spec: Option<&DatasetSpec>) -> Result<Self> {
        let source_files = match spec {
            Some(spec) => formats::split_files(spec.dataset_id, spec.split, &spec.root_path)
                .into_iter()
                .filter(|p| p.is_file())
                .map(|p| {
                    let sha256 = file_sha256(&p)?;
                    Ok(SourceFile { path: p, sha256 })
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Ok(SplitMetadata {
            name: split.name.clone(),
            num_examples: split.len(),
            num_classes: split.num_classes,
            source_seed: split.source_seed,
            content_sha256: split.content_hash(),
            standardization: split.standardization,
            source_files,
        })
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::ingestion(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::ingestion(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn write_sidecar(
    split: &DatasetSplit,
    spec: Option<&DatasetSpec>,
    path: &Path,
) -> Result<SplitMetadata> {
    let meta = SplitMetadata::describe(split, spec)?;
    crate::util::write_json_atomic(path, &meta)?;
    Ok(meta)
}

pub fn read_sidecar(path: &Path) -> Result<SplitMetadata> {
    let text = fs::read_to_string(path).map_err(|e| Error::ingestion(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::ingestion(path, e))
}
