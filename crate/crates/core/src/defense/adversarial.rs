//! Adversarial-trigger wrapper: a binary detector flags perturbed inputs and an
//! autoencoder purifies them before the covered model sees them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{binary_split, train_binary_detector, BinaryDetector, FLAG};
use crate::data::{DatasetSplit, ImageTensor, LabeledExample};
use crate::error::{Error, Result};
use crate::metrics::Classifier;
use crate::model::{
    build_model, load_checkpoint, save_checkpoint, train_on, ArchSpec, TrainConfig, TrainedModel,
    TrainingSet,
};
use crate::util;
use crate::watermarking::fgsm_batch;

/// Index-aligned (adversarial, clean) pairs.
#[derive(Clone, Debug)]
pub struct AdvPairs {
    pub adversarial: Vec<ImageTensor>,
    pub clean: Vec<ImageTensor>,
    pub epsilon: f32,
}

impl AdvPairs {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    /// Mean per-pixel squared difference between each adversarial image and its source.
    pub fn raw_mse(&self) -> f64 {
        mean_mse(&self.adversarial, &self.clean)
    }
}

fn mean_mse(a: &[ImageTensor], b: &[ImageTensor]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x.mse(y)).sum::<f64>() / a.len() as f64
}

/// FGSM counterpart of every clean image against `surrogate`, plus the binary
/// set {clean → 1, adversarial → 0}.
pub fn build_adv_pairs(
    clean: &DatasetSplit,
    surrogate: &TrainedModel,
    epsilon: f32,
) -> Result<(AdvPairs, DatasetSplit)> {
    if clean.is_empty() {
        return Err(Error::Validation(format!(
            "split `{}` is empty",
            clean.name
        )));
    }
    if epsilon == 0.0 {
        log::warn!("epsilon is 0: adversarial copies equal their sources and the detector task is degenerate");
    }
    let adversarial = fgsm_batch(surrogate, &clean.images(), &clean.labels(), epsilon)?;
    let binary = binary_split(
        format!("{}-advbin", clean.name),
        clean.examples.iter().cloned(),
        adversarial
            .iter()
            .zip(&clean.examples)
            .map(|(img, ex)| LabeledExample {
                image: img.clone(),
                label: FLAG,
                origin: ex.origin,
            }),
        clean,
    )?;
    let pairs = AdvPairs {
        adversarial,
        clean: clean.examples.iter().map(|e| e.image.clone()).collect(),
        epsilon,
    };
    Ok((pairs, binary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvDetectorMeta {
    pub epsilon: f32,
    pub arch: ArchSpec,
}

#[derive(Debug)]
pub struct AdvDetector {
    pub detector: BinaryDetector,
    pub train_meta: AdvDetectorMeta,
}

impl Classifier for AdvDetector {
    fn num_classes(&self) -> usize {
        2
    }

    fn classify(&self, images: &[&ImageTensor]) -> Result<Vec<usize>> {
        self.detector.classify(images)
    }
}

/// Trains the clean-vs-adversarial classifier (1 = clean, 0 = adversarial).
pub fn train_adv_detector(
    arch: &ArchSpec,
    train_set: &DatasetSplit,
    heldout: &DatasetSplit,
    epsilon: f32,
    cfg: &TrainConfig,
    model_seed: u64,
) -> Result<AdvDetector> {
    let detector = train_binary_detector(arch, train_set, heldout, cfg, model_seed)?;
    log::info!(
        "adversarial detector held-out precision {:.4} recall {:.4} f1 {:.4}",
        detector.heldout.precision,
        detector.heldout.recall,
        detector.heldout.f1
    );
    Ok(AdvDetector {
        detector,
        train_meta: AdvDetectorMeta {
            epsilon,
            arch: *arch,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurifierMeta {
    /// Mean reconstruction MSE on held-out pairs.
    pub heldout_mse: f64,
    /// Mean MSE between held-out adversarial inputs and their sources.
    pub heldout_raw_mse: f64,
}

#[derive(Debug)]
pub struct Purifier {
    pub autoencoder: TrainedModel,
    pub train_meta: PurifierMeta,
}

impl Purifier {
    pub fn purify(&self, images: &[&ImageTensor]) -> Result<Vec<ImageTensor>> {
        self.autoencoder.reconstruct(images)
    }

    /// Mean reconstruction MSE of `pairs.adversarial` against `pairs.clean`.
    pub fn reconstruction_mse(&self, pairs: &AdvPairs) -> Result<f64> {
        let refs: Vec<&ImageTensor> = pairs.adversarial.iter().collect();
        Ok(mean_mse(&self.purify(&refs)?, &pairs.clean))
    }
}

/// Trains an autoencoder mapping adversarial images to their clean sources.
pub fn train_purifier(
    arch: &ArchSpec,
    train_pairs: &AdvPairs,
    heldout: &AdvPairs,
    cfg: &TrainConfig,
    model_seed: u64,
) -> Result<Purifier> {
    if train_pairs.is_empty() {
        return Err(Error::Validation("purifier needs at least one pair".into()));
    }
    if arch.arch_id.is_classifier() {
        return Err(Error::Config(format!(
            "purifier must be an autoencoder, got {}",
            arch.arch_id
        )));
    }
    let set = TrainingSet::pairs(
        train_pairs.adversarial.iter().collect(),
        train_pairs.clean.iter().collect(),
    );
    let eval = TrainingSet::pairs(
        heldout.adversarial.iter().collect(),
        heldout.clean.iter().collect(),
    );
    let autoencoder = train_on(build_model(arch, model_seed)?, &set, &eval, None, cfg)?;
    let mut purifier = Purifier {
        autoencoder,
        train_meta: PurifierMeta {
            heldout_mse: 0.0,
            heldout_raw_mse: heldout.raw_mse(),
        },
    };
    if !heldout.is_empty() {
        purifier.train_meta.heldout_mse = purifier.reconstruction_mse(heldout)?;
    }
    log::info!(
        "purifier held-out MSE {:.6} (raw perturbation MSE {:.6})",
        purifier.train_meta.heldout_mse,
        purifier.train_meta.heldout_raw_mse
    );
    Ok(purifier)
}

/// Detector-gated purification in front of `inner`. Never denies service.
pub struct AdvWrappedModel<'a> {
    pub detector: &'a dyn Classifier,
    pub purifier: &'a Purifier,
    pub inner: &'a dyn Classifier,
}

impl AdvWrappedModel<'_> {
    /// Images with the flagged ones replaced by their purified versions.
    pub fn remediate(&self, images: &[&ImageTensor]) -> Result<Vec<ImageTensor>> {
        let flags = self.detector.classify(images)?;
        let flagged: Vec<&ImageTensor> = images
            .iter()
            .zip(&flags)
            .filter(|(_, &f)| f == FLAG)
            .map(|(i, _)| *i)
            .collect();
        let mut purified = self.purifier.purify(&flagged)?.into_iter();
        images
            .iter()
            .zip(&flags)
            .map(|(img, &f)| {
                if f == FLAG {
                    purified
                        .next()
                        .ok_or_else(|| Error::Validation("purifier returned too few images".into()))
                } else {
                    Ok((*img).clone())
                }
            })
            .collect()
    }
}

impl Classifier for AdvWrappedModel<'_> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn classify(&self, images: &[&ImageTensor]) -> Result<Vec<usize>> {
        let routed = self.remediate(images)?;
        let refs: Vec<&ImageTensor> = routed.iter().collect();
        self.inner.classify(&refs)
    }
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    inner_sha256: String,
    detector_sha256: String,
    purifier_sha256: String,
    detector_meta: AdvDetectorMeta,
    detector_heldout: crate::metrics::BinaryMetrics,
    purifier_meta: PurifierMeta,
    config: serde_json::Value,
}

/// Writes detector and purifier checkpoints plus a manifest naming the covered model.
pub fn save_adv_bundle(
    dir: &Path,
    detector: &AdvDetector,
    purifier: &Purifier,
    inner_sha256: &str,
    config: serde_json::Value,
) -> Result<()> {
    let none = BTreeMap::new();
    let manifest = BundleManifest {
        inner_sha256: inner_sha256.to_string(),
        detector_sha256: save_checkpoint(
            &detector.detector.model,
            &dir.join("detector.safetensors"),
            &none,
        )?,
        purifier_sha256: save_checkpoint(
            &purifier.autoencoder,
            &dir.join("purifier.safetensors"),
            &none,
        )?,
        detector_meta: detector.train_meta.clone(),
        detector_heldout: detector.detector.heldout,
        purifier_meta: purifier.train_meta.clone(),
        config,
    };
    util::write_json_atomic(&dir.join("bundle.json"), &manifest)
}

/// Loads a bundle, refusing it if it was built for a different inner model.
pub fn load_adv_bundle(dir: &Path, inner_sha256: &str) -> Result<(AdvDetector, Purifier)> {
    let path = dir.join("bundle.json");
    let m: BundleManifest = util::read_json(&path).map_err(|e| Error::ingestion(&path, e))?;
    if m.inner_sha256 != inner_sha256 {
        return Err(Error::Validation(format!(
            "wrapper bundle covers model {} but {} was supplied",
            m.inner_sha256, inner_sha256
        )));
    }
    let (det, _) = load_checkpoint(&dir.join("detector.safetensors"))?;
    let (ae, _) = load_checkpoint(&dir.join("purifier.safetensors"))?;
    if det.content_hash()? != m.detector_sha256 || ae.content_hash()? != m.purifier_sha256 {
        return Err(Error::ingestion(
            dir,
            "bundle checkpoints do not match their recorded hashes",
        ));
    }
    Ok((
        AdvDetector {
            detector: BinaryDetector {
                model: det,
                heldout: m.detector_heldout,
            },
            train_meta: m.detector_meta,
        },
        Purifier {
            autoencoder: ae,
            train_meta: m.purifier_meta,
        },
    ))
}
