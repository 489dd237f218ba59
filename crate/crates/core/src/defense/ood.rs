//! Out-of-distribution wrapper: a binary in-distribution detector, with a
//! uniformly random label returned for every input it rejects.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{binary_split, train_binary_detector, BinaryDetector, FLAG};
use crate::data::{DatasetId, DatasetSplit, ImageTensor, LabeledExample};
use crate::error::{Error, Result};
use crate::metrics::Classifier;
use crate::model::{load_checkpoint, save_checkpoint, ArchId, ArchSpec, TrainConfig};
use crate::util;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// The trigger-source dataset is among the negatives.
    Diluted,
    /// Datasets in `excluded_ids` are removed from the negatives.
    Excluded,
}

/// Negative examples for detector training, drawn evenly across sources.
#[derive(Clone, Debug)]
pub struct NegativePool {
    pub sources: Vec<DatasetSplit>,
    pub mode: PoolMode,
    pub excluded_ids: Vec<DatasetId>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub mode: PoolMode,
    pub excluded_ids: Vec<DatasetId>,
    pub seed: u64,
    /// (split name, examples available)
    pub sources: Vec<(String, usize)>,
}

impl NegativePool {
    /// In excluded mode, drops every example whose origin is an excluded dataset
    /// and then every source left empty.
    pub fn new(
        sources: Vec<DatasetSplit>,
        mode: PoolMode,
        excluded_ids: Vec<DatasetId>,
        seed: u64,
    ) -> Result<Self> {
        let sources: Vec<DatasetSplit> = match mode {
            PoolMode::Diluted => sources,
            PoolMode::Excluded => sources
                .into_iter()
                .map(|mut s| {
                    s.examples
                        .retain(|e| !e.origin.is_some_and(|o| excluded_ids.contains(&o.dataset)));
                    s
                })
                .collect(),
        };
        let sources: Vec<DatasetSplit> = sources.into_iter().filter(|s| !s.is_empty()).collect();
        if sources.is_empty() {
            return Err(Error::Config(format!(
                "negative pool is empty ({mode:?} mode, excluded {excluded_ids:?})"
            )));
        }
        Ok(NegativePool {
            sources,
            mode,
            excluded_ids,
            seed,
        })
    }

    pub fn manifest(&self) -> PoolManifest {
        PoolManifest {
            mode: self.mode,
            excluded_ids: self.excluded_ids.clone(),
            seed: self.seed,
            sources: self
                .sources
                .iter()
                .map(|s| (s.name.clone(), s.len()))
                .collect(),
        }
    }

    pub fn contains_dataset(&self, id: DatasetId) -> bool {
        self.sources.iter().any(|s| {
            s.examples
                .iter()
                .any(|e| e.origin.is_some_and(|o| o.dataset == id))
        })
    }

    /// `total` negatives split evenly over sources (remainder to the first
    /// sources), sampled without replacement. Returns the draw and the per-source counts.
    pub fn draw(&self, total: usize) -> Result<(Vec<LabeledExample>, BTreeMap<String, usize>)> {
        let s = self.sources.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(total);
        let mut counts = BTreeMap::new();
        for (i, src) in self.sources.iter().enumerate() {
            let share = total / s + usize::from(i < total % s);
            if share > src.len() {
                return Err(Error::Config(format!(
                    "pool source `{}` has {} examples, {share} requested",
                    src.name,
                    src.len()
                )));
            }
            for j in rand::seq::index::sample(&mut rng, src.len(), share) {
                out.push(src.examples[j].clone());
            }
            counts.insert(src.name.clone(), share);
        }
        Ok((out, counts))
    }
}

/// Positives are all of `in_dist` (label 1); negatives are `balance·|in_dist|`
/// pool draws (label 0).
pub fn build_ood_training_set(
    in_dist: &DatasetSplit,
    pool: &NegativePool,
    balance: f64,
) -> Result<(DatasetSplit, BTreeMap<String, usize>)> {
    if !(balance > 0.0 && balance.is_finite()) {
        return Err(Error::Config(format!("balance must be > 0, got {balance}")));
    }
    if in_dist.is_empty() {
        return Err(Error::Validation(format!(
            "split `{}` is empty",
            in_dist.name
        )));
    }
    let n_neg = (balance * in_dist.len() as f64).round() as usize;
    let (negatives, counts) = pool.draw(n_neg)?;
    let split = binary_split(
        format!("{}-oodbin-{:?}", in_dist.name, pool.mode).to_lowercase(),
        in_dist.examples.iter().cloned(),
        negatives,
        in_dist,
    )?;
    Ok((split, counts))
}

pub const OOD_DETECTOR_ARCHS: [ArchId; 4] = [
    ArchId::MobilenetV2,
    ArchId::Resnet18,
    ArchId::Vgg11,
    ArchId::VitSmall,
];

#[derive(Debug)]
pub struct OODDetector {
    pub detector: BinaryDetector,
    pub pool_meta: PoolManifest,
}

impl Classifier for OODDetector {
    fn num_classes(&self) -> usize {
        2
    }

    fn classify(&self, images: &[&ImageTensor]) -> Result<Vec<usize>> {
        self.detector.classify(images)
    }
}

/// Trains the in-distribution (1) vs OOD (0) detector; held-out binary metrics
/// are recorded per epoch in the model history.
pub fn train_ood_detector(
    arch: &ArchSpec,
    train_set: &DatasetSplit,
    heldout: &DatasetSplit,
    pool_meta: PoolManifest,
    cfg: &TrainConfig,
    model_seed: u64,
) -> Result<OODDetector> {
    if !OOD_DETECTOR_ARCHS.contains(&arch.arch_id) {
        return Err(Error::Config(format!(
            "OOD detector arch must be one of mobilenet_v2, resnet18, vgg11, vit_small; got {}",
            arch.arch_id
        )));
    }
    let detector = train_binary_detector(arch, train_set, heldout, cfg, model_seed)?;
    log::info!(
        "OOD detector held-out precision {:.4} recall {:.4} f1 {:.4}",
        detector.heldout.precision,
        detector.heldout.recall,
        detector.heldout.f1
    );
    Ok(OODDetector {
        detector,
        pool_meta,
    })
}

/// Detector-gated pass-through; rejected inputs get a label from a seeded stream.
///
/// The denial stream is the only mutable state and is serialized by a mutex, so
/// labels are drawn in query order.
pub struct OODWrappedModel<'a> {
    pub detector: &'a dyn Classifier,
    pub inner: &'a dyn Classifier,
    pub denial_seed: u64,
    stream: Mutex<ChaCha8Rng>,
}

impl<'a> OODWrappedModel<'a> {
    pub fn new(detector: &'a dyn Classifier, inner: &'a dyn Classifier, denial_seed: u64) -> Self {
        OODWrappedModel {
            detector,
            inner,
            denial_seed,
            stream: Mutex::new(ChaCha8Rng::seed_from_u64(denial_seed)),
        }
    }

    /// Restarts the denial stream so a replay yields the same labels.
    pub fn reset_denial_stream(&self) {
        *self.stream.lock().unwrap_or_else(|p| p.into_inner()) =
            ChaCha8Rng::seed_from_u64(self.denial_seed);
    }
}

impl Classifier for OODWrappedModel<'_> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn classify(&self, images: &[&ImageTensor]) -> Result<Vec<usize>> {
        let flags = self.detector.classify(images)?;
        let passed: Vec<&ImageTensor> = images
            .iter()
            .zip(&flags)
            .filter(|(_, &f)| f != FLAG)
            .map(|(i, _)| *i)
            .collect();
        let mut inner_labels = self.inner.classify(&passed)?.into_iter();
        let k = self.inner.num_classes();
        let mut rng = self.stream.lock().unwrap_or_else(|p| p.into_inner());
        flags
            .iter()
            .map(|&f| {
                if f == FLAG {
                    Ok(rng.random_range(0..k))
                } else {
                    inner_labels.next().ok_or_else(|| {
                        Error::Validation("inner model returned too few labels".into())
                    })
                }
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    inner_sha256: String,
    detector_sha256: String,
    detector_heldout: crate::metrics::BinaryMetrics,
    pool: PoolManifest,
    denial_seed: u64,
    config: serde_json::Value,
}

pub fn save_ood_bundle(
    dir: &Path,
    detector: &OODDetector,
    denial_seed: u64,
    inner_sha256: &str,
    config: serde_json::Value,
) -> Result<()> {
    let manifest = BundleManifest {
        inner_sha256: inner_sha256.to_string(),
        detector_sha256: save_checkpoint(
            &detector.detector.model,
            &dir.join("detector.safetensors"),
            &BTreeMap::new(),
        )?,
        detector_heldout: detector.detector.heldout,
        pool: detector.pool_meta.clone(),
        denial_seed,
        config,
    };
    util::write_json_atomic(&dir.join("bundle.json"), &manifest)
}

/// Returns the detector and the recorded denial seed.
pub fn load_ood_bundle(dir: &Path, inner_sha256: &str) -> Result<(OODDetector, u64)> {
    let path = dir.join("bundle.json");
    let m: BundleManifest = util::read_json(&path).map_err(|e| Error::ingestion(&path, e))?;
    if m.inner_sha256 != inner_sha256 {
        return Err(Error::Validation(format!(
            "wrapper bundle covers model {} but {} was supplied",
            m.inner_sha256, inner_sha256
        )));
    }
    let (det, _) = load_checkpoint(&dir.join("detector.safetensors"))?;
    if det.content_hash()? != m.detector_sha256 {
        return Err(Error::ingestion(
            dir,
            "detector checkpoint does not match its recorded hash",
        ));
    }
    Ok((
        OODDetector {
            detector: BinaryDetector {
                model: det,
                heldout: m.detector_heldout,
            },
            pool_meta: m.pool,
        },
        m.denial_seed,
    ))
}
