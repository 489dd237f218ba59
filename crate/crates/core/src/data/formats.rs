//! Readers for the canonical published on-disk layouts.
//!
//! Expected layout under a data root:
//!
//! ```text
//! <root>/cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin
//! <root>/cifar-100-binary/{train,test}.bin
//! <root>/svhn/{train,test}_32x32.mat
//! <root>/cinic-10/{train,test}/<class>/*.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{DatasetId, SplitKind, CHANNELS, HEIGHT, IMAGE_LEN, WIDTH};
use crate::error::{Error, Result};

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// CINIC-10 file names of images taken from CIFAR-10 start with this prefix.
pub const CINIC10_CIFAR_PREFIX: &str = "cifar10-";

pub(crate) type Visitor<'a> = dyn FnMut(&[u8], usize, usize) -> Result<()> + 'a;

pub(crate) fn dataset_dir(dataset: DatasetId, root: &Path) -> PathBuf {
    match dataset {
        DatasetId::Cifar10 => root.join("cifar-10-batches-bin"),
        DatasetId::Cifar100 => root.join("cifar-100-binary"),
        DatasetId::Svhn => root.join("svhn"),
        DatasetId::Cinic10 => root.join("cinic-10"),
    }
}

/// Files that make up a split, in read order.
pub(crate) fn split_files(dataset: DatasetId, split: SplitKind, root: &Path) -> Vec<PathBuf> {
    let dir = dataset_dir(dataset, root);
    match (dataset, split) {
        (DatasetId::Cifar10, SplitKind::Train) => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect(),
        (DatasetId::Cifar10, SplitKind::Test) => vec![dir.join("test_batch.bin")],
        (DatasetId::Cifar100, SplitKind::Train) => vec![dir.join("train.bin")],
        (DatasetId::Cifar100, SplitKind::Test) => vec![dir.join("test.bin")],
        (DatasetId::Svhn, s) => vec![dir.join(format!("{}_32x32.mat", s.as_str()))],
        (DatasetId::Cinic10, s) => vec![dir.join(s.as_str())],
    }
}

pub(crate) fn read_split(
    dataset: DatasetId,
    split: SplitKind,
    root: &Path,
    non_cifar_only: bool,
    visit: &mut Visitor<'_>,
) -> Result<()> {
    let files = split_files(dataset, split, root);
    match dataset {
        DatasetId::Cifar10 => {
            let mut index = 0;
            for f in &files {
                read_cifar_bin(f, 1, 0, 10, &mut index, visit)?;
            }
            Ok(())
        }
        DatasetId::Cifar100 => {
            let mut index = 0;
            // record = coarse label, fine label, pixels; fine labels are used
            read_cifar_bin(&files[0], 2, 1, 100, &mut index, visit)
        }
        DatasetId::Svhn => read_svhn_mat(&files[0], visit),
        DatasetId::Cinic10 => read_cinic_dir(&files[0], non_cifar_only, visit),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::ingestion(path, format!("cannot read file: {e}")))
}

fn read_cifar_bin(
    path: &Path,
    label_bytes: usize,
    label_offset: usize,
    num_classes: usize,
    index: &mut usize,
    visit: &mut Visitor<'_>,
) -> Result<()> {
    let bytes = read_bytes(path)?;
    let record = label_bytes + IMAGE_LEN;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::ingestion(
            path,
            format!(
                "size {} is not a positive multiple of the {record}-byte record",
                bytes.len()
            ),
        ));
    }
    for chunk in bytes.chunks_exact(record) {
        let label = usize::from(chunk[label_offset]);
        if label >= num_classes {
            return Err(Error::ingestion(
                path,
                format!("record {} has label {label} >= {num_classes}", *index),
            ));
        }
        visit(&chunk[label_bytes..], label, *index)?;
        *index += 1;
    }
    Ok(())
}

fn read_svhn_mat(path: &Path, visit: &mut Visitor<'_>) -> Result<()> {
    let bytes = read_bytes(path)?;
    let mat = matfile::MatFile::parse(bytes.as_slice())
        .map_err(|e| Error::ingestion(path, format!("invalid MAT file: {e:?}")))?;
    let x = mat
        .find_by_name("X")
        .ok_or_else(|| Error::ingestion(path, "missing array `X`"))?;
    let y = mat
        .find_by_name("y")
        .ok_or_else(|| Error::ingestion(path, "missing array `y`"))?;
    let size = x.size();
    if size.len() != 4 || size[0] != HEIGHT || size[1] != WIDTH || size[2] != CHANNELS {
        return Err(Error::ingestion(
            path,
            format!("`X` must be 32x32x3xN, got {size:?}"),
        ));
    }
    let n = size[3];
    let pixels = match x.data() {
        matfile::NumericData::UInt8 { real, .. } => real,
        _ => return Err(Error::ingestion(path, "`X` must be uint8")),
    };
    let labels: Vec<f64> = match y.data() {
        matfile::NumericData::Double { real, .. } => real.clone(),
        matfile::NumericData::UInt8 { real, .. } => real.iter().map(|&v| f64::from(v)).collect(),
        _ => return Err(Error::ingestion(path, "`y` must be double or uint8")),
    };
    if labels.len() != n || pixels.len() != n * IMAGE_LEN {
        return Err(Error::ingestion(
            path,
            "`X` and `y` disagree on example count",
        ));
    }
    let mut chw = vec![0u8; IMAGE_LEN];
    for (i, &raw) in labels.iter().enumerate() {
        // column-major: row varies fastest, then column, channel, example
        for c in 0..CHANNELS {
            for r in 0..HEIGHT {
                for col in 0..WIDTH {
                    let src = r + HEIGHT * (col + WIDTH * (c + CHANNELS * i));
                    chw[c * HEIGHT * WIDTH + r * WIDTH + col] = pixels[src];
                }
            }
        }
        if raw.fract() != 0.0 || !(1.0..=10.0).contains(&raw) {
            return Err(Error::ingestion(
                path,
                format!("example {i} has label {raw}"),
            ));
        }
        // digit 0 is stored as 10
        let label = raw as usize % 10;
        visit(&chw, label, i)?;
    }
    Ok(())
}

fn read_cinic_dir(dir: &Path, non_cifar_only: bool, visit: &mut Visitor<'_>) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::ingestion(dir, "directory not found"));
    }
    let mut index = 0;
    for (label, class) in CIFAR10_CLASSES.iter().enumerate() {
        let class_dir = dir.join(class);
        let mut files: Vec<PathBuf> = fs::read_dir(&class_dir)
            .map_err(|e| Error::ingestion(&class_dir, format!("cannot list directory: {e}")))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for f in files {
            let from_cifar = f
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(CINIC10_CIFAR_PREFIX));
            if non_cifar_only && from_cifar {
                index += 1;
                continue;
            }
            let chw = decode_png_chw(&f)?;
            visit(&chw, label, index)?;
            index += 1;
        }
    }
    Ok(())
}

fn decode_png_chw(path: &Path) -> Result<Vec<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::ingestion(path, format!("cannot decode image: {e}")))?
        .to_rgb8();
    let img = if img.width() as usize != WIDTH || img.height() as usize != HEIGHT {
        image::imageops::resize(
            &img,
            WIDTH as u32,
            HEIGHT as u32,
            image::imageops::FilterType::Triangle,
        )
    } else {
        img
    };
    let mut chw = vec![0u8; IMAGE_LEN];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..CHANNELS {
            chw[c * HEIGHT * WIDTH + y as usize * WIDTH + x as usize] = px[c];
        }
    }
    Ok(chw)
}
