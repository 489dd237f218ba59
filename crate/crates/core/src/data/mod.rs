//! Dataset ingestion, preprocessing and subsampling.
//!
//! Images are held as `[0,1]` CHW pixels. Per-channel standardization constants
//! travel with every split and are applied inside the models, so wrapped and
//! inner models always share the same preprocessing.

mod formats;
mod sidecar;
pub mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use formats::{CIFAR10_CLASSES, CINIC10_CIFAR_PREFIX};
pub use sidecar::{read_sidecar, write_sidecar, SourceFile, SplitMetadata};

pub const CHANNELS: usize = 3;
pub const HEIGHT: usize = 32;
pub const WIDTH: usize = 32;
pub const IMAGE_LEN: usize = CHANNELS * HEIGHT * WIDTH;

/// A 3×32×32 image in CHW order with pixel values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Vec<f32>);

impl ImageTensor {
    pub fn new(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != IMAGE_LEN {
            return Err(Error::Validation(format!(
                "image must have {IMAGE_LEN} values (3x32x32), got {}",
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite pixel at index {i}")));
        }
        Ok(ImageTensor(pixels))
    }

    pub fn from_u8_chw(bytes: &[u8]) -> Result<Self> {
        Self::new(bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }

    pub fn filled(value: f32) -> Self {
        ImageTensor(vec![value; IMAGE_LEN])
    }

    pub fn pixels(&self) -> &[f32] {
        &self.0
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.0
    }

    pub fn linf_distance(&self, other: &ImageTensor) -> f32 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn mse(&self, other: &ImageTensor) -> f64 {
        let sum: f64 = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| {
                let d = f64::from(a - b);
                d * d
            })
            .sum();
        sum / IMAGE_LEN as f64
    }

    pub(crate) fn hash_into(&self, hasher: &mut Sha256) {
        for v in &self.0 {
            hasher.update(v.to_le_bytes());
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Cifar10,
    Cifar100,
    Cinic10,
    Svhn,
}

impl DatasetId {
    pub const ALL: [DatasetId; 4] = [
        DatasetId::Cifar10,
        DatasetId::Cifar100,
        DatasetId::Cinic10,
        DatasetId::Svhn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Cifar100 => "cifar100",
            DatasetId::Cinic10 => "cinic10",
            DatasetId::Svhn => "svhn",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            DatasetId::Cifar100 => 100,
            _ => 10,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetId::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown dataset id `{s}` (expected one of cifar10, cifar100, cinic10, svhn)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        }
    }
}

impl FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "test" => Ok(SplitKind::Test),
            _ => Err(Error::Config(format!(
                "unknown split `{s}` (expected train or test)"
            ))),
        }
    }
}

/// Where an example came from. Used for provenance counting and for keeping
/// trigger sources out of the marking set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub dataset: DatasetId,
    pub split: SplitKind,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub image: ImageTensor,
    pub label: usize,
    pub origin: Option<Origin>,
}

impl LabeledExample {
    pub fn new(image: ImageTensor, label: usize) -> Self {
        LabeledExample {
            image,
            label,
            origin: None,
        }
    }
}

/// Per-channel mean/std computed over a training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: [f32; CHANNELS],
    pub std: [f32; CHANNELS],
}

impl Default for Standardization {
    fn default() -> Self {
        Standardization {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }
}

#[derive(Default)]
pub(crate) struct ChannelStats {
    count: u64,
    sum: [f64; CHANNELS],
    sum_sq: [f64; CHANNELS],
}

impl ChannelStats {
    pub(crate) fn push_u8(&mut self, chw: &[u8]) {
        let plane = HEIGHT * WIDTH;
        for c in 0..CHANNELS {
            for &b in &chw[c * plane..(c + 1) * plane] {
                let v = f64::from(b) / 255.0;
                self.sum[c] += v;
                self.sum_sq[c] += v * v;
            }
        }
        self.count += plane as u64;
    }

    pub(crate) fn push(&mut self, image: &ImageTensor) {
        let plane = HEIGHT * WIDTH;
        for c in 0..CHANNELS {
            for &v in &image.pixels()[c * plane..(c + 1) * plane] {
                let v = f64::from(v);
                self.sum[c] += v;
                self.sum_sq[c] += v * v;
            }
        }
        self.count += plane as u64;
    }

    pub(crate) fn finish(&self) -> Standardization {
        if self.count == 0 {
            return Standardization::default();
        }
        let n = self.count as f64;
        let mut out = Standardization::default();
        for c in 0..CHANNELS {
            let mean = self.sum[c] / n;
            let var = (self.sum_sq[c] / n - mean * mean).max(0.0);
            out.mean[c] = mean as f32;
            // floor keeps constant-colour synthetic splits usable
            out.std[c] = var.sqrt().max(1e-3) as f32;
        }
        out
    }
}

impl Standardization {
    pub fn from_examples(examples: &[LabeledExample]) -> Self {
        let mut stats = ChannelStats::default();
        for ex in examples {
            stats.push(&ex.image);
        }
        stats.finish()
    }

    pub fn standardize(&self, image: &ImageTensor) -> Vec<f32> {
        let plane = HEIGHT * WIDTH;
        image
            .pixels()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i / plane;
                (v - self.mean[c]) / self.std[c]
            })
            .collect()
    }

    pub fn destandardize(&self, values: &[f32]) -> Result<ImageTensor> {
        let plane = HEIGHT * WIDTH;
        ImageTensor::new(
            values
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let c = i / plane;
                    v * self.std[c] + self.mean[c]
                })
                .collect(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub name: String,
    pub examples: Vec<LabeledExample>,
    pub num_classes: usize,
    pub source_seed: u64,
    pub standardization: Standardization,
}

impl DatasetSplit {
    /// Builds a split, checking every label against `num_classes`.
    pub fn new(
        name: impl Into<String>,
        examples: Vec<LabeledExample>,
        num_classes: usize,
        standardization: Standardization,
    ) -> Result<Self> {
        let split = DatasetSplit {
            name: name.into(),
            examples,
            num_classes,
            source_seed: 0,
            standardization,
        };
        split.validate_labels()?;
        Ok(split)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn images(&self) -> Vec<&ImageTensor> {
        self.examples.iter().map(|e| &e.image).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn validate_labels(&self) -> Result<()> {
        if let Some((i, ex)) = self
            .examples
            .iter()
            .enumerate()
            .find(|(_, e)| e.label >= self.num_classes)
        {
            return Err(Error::Validation(format!(
                "split `{}`: example {i} has label {} but num_classes is {}",
                self.name, ex.label, self.num_classes
            )));
        }
        Ok(())
    }

    /// SHA-256 over pixels and labels, in order.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.num_classes as u64).to_le_bytes());
        for ex in &self.examples {
            ex.image.hash_into(&mut hasher);
            hasher.update((ex.label as u64).to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> DatasetSplit {
        DatasetSplit {
            name: name.into(),
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            num_classes: self.num_classes,
            source_seed: self.source_seed,
            standardization: self.standardization,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub dataset_id: DatasetId,
    pub split: SplitKind,
    pub root_path: PathBuf,
}

impl DatasetSpec {
    pub fn new(dataset_id: DatasetId, split: SplitKind, root_path: impl Into<PathBuf>) -> Self {
        DatasetSpec {
            dataset_id,
            split,
            root_path: root_path.into(),
        }
    }

    /// Directory holding the dataset's canonical extracted layout.
    pub fn dataset_dir(&self) -> PathBuf {
        formats::dataset_dir(self.dataset_id, &self.root_path)
    }

    pub fn split_name(&self) -> String {
        format!("{}-{}", self.dataset_id, self.split.as_str())
    }
}

type StatsKey = (DatasetId, PathBuf);

fn stats_cache() -> &'static Mutex<HashMap<StatsKey, Standardization>> {
    static CACHE: std::sync::OnceLock<Mutex<HashMap<StatsKey, Standardization>>> =
        std::sync::OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Standardization constants from the training split of `dataset` under `root`.
pub fn train_standardization(dataset: DatasetId, root: &Path) -> Result<Standardization> {
    let key = (dataset, root.to_path_buf());
    if let Some(s) = stats_cache()
        .lock()
        .expect("stats cache poisoned")
        .get(&key)
    {
        return Ok(*s);
    }
    let mut stats = ChannelStats::default();
    formats::read_split(dataset, SplitKind::Train, root, false, &mut |chw, _, _| {
        stats.push_u8(chw);
        Ok(())
    })?;
    let s = stats.finish();
    stats_cache()
        .lock()
        .expect("stats cache poisoned")
        .insert(key, s);
    Ok(s)
}

/// Loads a full split in canonical class order with train-split standardization.
pub fn load_dataset(spec: &DatasetSpec) -> Result<DatasetSplit> {
    load_filtered(spec, false)
}

/// CINIC-10 images that do not originate from CIFAR-10 (ImageNet-derived portion).
pub fn load_cinic10_non_cifar(root: &Path, split: SplitKind) -> Result<DatasetSplit> {
    let spec = DatasetSpec::new(DatasetId::Cinic10, split, root);
    let mut out = load_filtered(&spec, true)?;
    out.name = format!("{}-noncifar", spec.split_name());
    Ok(out)
}

fn load_filtered(spec: &DatasetSpec, non_cifar_only: bool) -> Result<DatasetSplit> {
    let mut examples = Vec::new();
    formats::read_split(
        spec.dataset_id,
        spec.split,
        &spec.root_path,
        non_cifar_only,
        &mut |chw, label, index| {
            examples.push(LabeledExample {
                image: ImageTensor::from_u8_chw(chw)?,
                label,
                origin: Some(Origin {
                    dataset: spec.dataset_id,
                    split: spec.split,
                    index,
                }),
            });
            Ok(())
        },
    )?;
    if examples.is_empty() {
        return Err(Error::ingestion(
            spec.dataset_dir(),
            "split contains no images",
        ));
    }
    let standardization = match spec.split {
        SplitKind::Train if !non_cifar_only => {
            let s = Standardization::from_examples(&examples);
            stats_cache()
                .lock()
                .expect("stats cache poisoned")
                .insert((spec.dataset_id, spec.root_path.clone()), s);
            s
        }
        _ => train_standardization(spec.dataset_id, &spec.root_path)?,
    };
    DatasetSplit::new(
        spec.split_name(),
        examples,
        spec.dataset_id.num_classes(),
        standardization,
    )
}

/// Indices kept by [`subsample`], ascending.
pub fn subsample_indices(len: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "subsample fraction must lie in (0,1], got {fraction}"
        )));
    }
    let k = (fraction * len as f64).floor() as usize;
    if k == 0 {
        return Err(Error::Config(format!(
            "subsample of {len} examples at fraction {fraction} would be empty"
        )));
    }
    if k == len {
        return Ok((0..len).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, len, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Uniform sampling without replacement of `floor(fraction·|split|)` examples.
/// Original relative order is kept; class balance is not enforced.
pub fn subsample(split: &DatasetSplit, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    let idx = subsample_indices(split.len(), fraction, seed)?;
    if idx.len() == split.len() {
        return Ok(split.clone());
    }
    let mut out = split.subset(format!("{}-sub{fraction:.4}-s{seed}", split.name), &idx);
    out.source_seed = seed;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_split(n: usize) -> DatasetSplit {
        let examples = (0..n)
            .map(|i| LabeledExample::new(ImageTensor::filled((i % 7) as f32 / 7.0), i % 10))
            .collect();
        DatasetSplit::new("toy", examples, 10, Standardization::default()).unwrap()
    }

    #[test]
    fn subsample_floor_arithmetic() {
        assert_eq!(
            subsample_indices(50_000, 1.0 / 3.0, 7).unwrap().len(),
            16_666
        );
    }

    #[test]
    fn subsample_identity_at_one() {
        let s = toy_split(23);
        let sub = subsample(&s, 1.0, 3).unwrap();
        assert_eq!(sub.labels(), s.labels());
        assert_eq!(sub.content_hash(), s.content_hash());
    }

    #[test]
    fn subsample_rejects_bad_fraction() {
        let s = toy_split(10);
        assert!(matches!(subsample(&s, 0.0, 1), Err(Error::Config(_))));
        assert!(matches!(subsample(&s, 1.5, 1), Err(Error::Config(_))));
        assert!(matches!(subsample(&s, 0.05, 1), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_dataset_id_is_config_error() {
        assert!(matches!(
            "mnist".parse::<DatasetId>(),
            Err(Error::Config(_))
        ));
        assert_eq!("svhn".parse::<DatasetId>().unwrap(), DatasetId::Svhn);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let ex = vec![LabeledExample::new(ImageTensor::filled(0.0), 10)];
        assert!(DatasetSplit::new("bad", ex, 10, Standardization::default()).is_err());
    }

    #[test]
    fn image_shape_and_finiteness_checked() {
        assert!(ImageTensor::new(vec![0.0; 10]).is_err());
        let mut px = vec![0.0; IMAGE_LEN];
        px[5] = f32::NAN;
        assert!(ImageTensor::new(px).is_err());
    }

    #[test]
    fn standardization_round_trip() {
        let s = Standardization {
            mean: [0.49, 0.48, 0.45],
            std: [0.25, 0.24, 0.26],
        };
        let img =
            ImageTensor::new((0..IMAGE_LEN).map(|i| (i % 256) as f32 / 255.0).collect()).unwrap();
        let back = s.destandardize(&s.standardize(&img)).unwrap();
        assert!(img.linf_distance(&back) <= 1e-6);
    }
}
