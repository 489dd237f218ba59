#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use wmguard::data::synthetic::{write_synthetic_root, SyntheticSizes};
use wmguard::harness::ExperimentConfig;

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Shared synthetic data root, written once per test binary.
pub fn synthetic_root() -> &'static Path {
    static ROOT: OnceLock<tempfile::TempDir> = OnceLock::new();
    ROOT.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_root(dir.path(), SyntheticSizes::default(), 11).unwrap();
        dir
    })
    .path()
}

/// The smoke config pointed at the synthetic root and `out`.
pub fn tiny_config(out: &Path, overrides: &[&str]) -> ExperimentConfig {
    let mut all = vec![
        format!("data.root=\"{}\"", synthetic_root().display()),
        format!("out_dir=\"{}\"", out.display()),
    ];
    all.extend(overrides.iter().map(|s| s.to_string()));
    ExperimentConfig::load(&workspace_root().join("configs/tiny.toml"), &all).unwrap()
}
