use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::fgsm::fgsm_batch;
use crate::data::{DatasetId, DatasetSplit, ImageTensor, Origin, IMAGE_LEN};
use crate::error::{Error, Result};
use crate::model::TrainedModel;
use crate::util::{self, F32Arrays};

pub const DEFAULT_TRIGGER_COUNT: usize = 100;
pub const DEFAULT_EPSILON: f32 = 8.0 / 255.0;
pub const DEFAULT_THRESHOLD: f64 = 0.9;

/// Slack for f32 rounding in `x + ε − x` when checking the L∞ bound.
const LINF_SLACK: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerType {
    Adversarial,
    Ood,
    RandomLabel,
}

impl TriggerType {
    pub const ALL: [TriggerType; 3] = [
        TriggerType::Adversarial,
        TriggerType::Ood,
        TriggerType::RandomLabel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TriggerType::Adversarial => "adversarial",
            TriggerType::Ood => "ood",
            TriggerType::RandomLabel => "random_label",
        }
    }
}

impl fmt::Display for TriggerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TriggerType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TriggerType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown trigger type `{s}` (expected adversarial, ood or random_label)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriggerItem {
    pub image: ImageTensor,
    pub assigned_label: usize,
    pub true_label: Option<usize>,
    /// Unperturbed image; present for adversarial items only.
    pub clean_source: Option<ImageTensor>,
    pub origin: Option<Origin>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TriggerSourceMeta {
    pub source_split: String,
    pub source_content_sha256: String,
    pub epsilon: Option<f32>,
    pub foreign_dataset: Option<DatasetId>,
    pub surrogate_sha256: Option<String>,
}

/// The secret marking key: trigger images with their assigned labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerSet {
    pub items: Vec<TriggerItem>,
    pub trigger_type: TriggerType,
    pub gen_seed: u64,
    /// Class count of the task being marked.
    pub num_classes: usize,
    pub source_meta: TriggerSourceMeta,
}

impl TriggerSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn images(&self) -> Vec<&ImageTensor> {
        self.items.iter().map(|i| &i.image).collect()
    }

    pub fn assigned_labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.assigned_label).collect()
    }

    /// Dataset origins of the source images, for keeping them out of other splits.
    pub fn source_origins(&self) -> Vec<Origin> {
        self.items.iter().filter_map(|i| i.origin).collect()
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.trigger_type.as_str().as_bytes());
        h.update(self.gen_seed.to_le_bytes());
        h.update((self.num_classes as u64).to_le_bytes());
        h.update(
            util::canonical_json(&self.source_meta)
                .unwrap_or_default()
                .as_bytes(),
        );
        for item in &self.items {
            item.image.hash_into(&mut h);
            h.update((item.assigned_label as u64).to_le_bytes());
            h.update(item.true_label.map_or(u64::MAX, |l| l as u64).to_le_bytes());
            if let Some(c) = &item.clean_source {
                c.hash_into(&mut h);
            }
        }
        hex::encode(h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, item) in self.items.iter().enumerate() {
            if item.assigned_label >= self.num_classes {
                return Err(Error::Validation(format!(
                    "trigger {i}: assigned label {} outside 0..{}",
                    item.assigned_label, self.num_classes
                )));
            }
            match self.trigger_type {
                TriggerType::RandomLabel | TriggerType::Adversarial => {
                    if item.true_label == Some(item.assigned_label) || item.true_label.is_none() {
                        return Err(Error::Validation(format!(
                            "trigger {i}: assigned label must differ from a recorded true label"
                        )));
                    }
                }
                TriggerType::Ood => {}
            }
            if self.trigger_type == TriggerType::Adversarial {
                let eps = self.source_meta.epsilon.ok_or_else(|| {
                    Error::Validation("adversarial trigger set has no epsilon".into())
                })?;
                let clean = item.clean_source.as_ref().ok_or_else(|| {
                    Error::Validation(format!("adversarial trigger {i} has no clean source"))
                })?;
                let d = item.image.linf_distance(clean);
                if d > eps + LINF_SLACK {
                    return Err(Error::Validation(format!(
                        "adversarial trigger {i}: L-inf distance {d} exceeds epsilon {eps}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The public verification key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationKey {
    pub trigger_ref: String,
    pub threshold: f64,
}

impl VerificationKey {
    pub fn new(triggers: &TriggerSet, threshold: f64) -> Result<Self> {
        let key = VerificationKey {
            trigger_ref: triggers.content_hash(),
            threshold,
        };
        key.validate()?;
        Ok(key)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Key(format!(
                "threshold must lie in (0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Per-family inputs to key generation.
pub enum TriggerSources<'a> {
    /// Clean split to perturb and the model whose gradients drive FGSM.
    Adversarial {
        clean: &'a DatasetSplit,
        surrogate: &'a TrainedModel,
        epsilon: f32,
    },
    /// Foreign split to sample from; `task` is the split being marked.
    Ood {
        foreign: &'a DatasetSplit,
        task: &'a DatasetSplit,
    },
    RandomLabel {
        split: &'a DatasetSplit,
    },
}

impl TriggerSources<'_> {
    fn kind(&self) -> TriggerType {
        match self {
            TriggerSources::Adversarial { .. } => TriggerType::Adversarial,
            TriggerSources::Ood { .. } => TriggerType::Ood,
            TriggerSources::RandomLabel { .. } => TriggerType::RandomLabel,
        }
    }
}

/// Uniform draw from `0..k` excluding `exclude`.
fn wrong_label(rng: &mut ChaCha8Rng, exclude: usize, k: usize) -> usize {
    (exclude + 1 + rng.random_range(0..k - 1)) % k
}

fn split_dataset(split: &DatasetSplit) -> Option<DatasetId> {
    split
        .examples
        .first()
        .and_then(|e| e.origin)
        .map(|o| o.dataset)
}

/// Generates a trigger set of `n` items and its verification key at the
/// default threshold.
pub fn key_generation(
    kind: TriggerType,
    n: usize,
    seed: u64,
    sources: TriggerSources<'_>,
) -> Result<(TriggerSet, VerificationKey)> {
    if sources.kind() != kind {
        return Err(Error::Config(format!(
            "trigger type {kind} given {} sources",
            sources.kind()
        )));
    }
    if n == 0 {
        return Err(Error::Config("trigger count must be >= 1".into()));
    }
    let source = match &sources {
        TriggerSources::Adversarial { clean, .. } => *clean,
        TriggerSources::Ood { foreign, .. } => *foreign,
        TriggerSources::RandomLabel { split } => *split,
    };
    if n > source.len() {
        return Err(Error::Config(format!(
            "{n} triggers requested but source split `{}` has {} images",
            source.name,
            source.len()
        )));
    }
    let num_classes = match &sources {
        TriggerSources::Ood { task, .. } => task.num_classes,
        _ => source.num_classes,
    };
    if num_classes < 2 {
        return Err(Error::Config("marked task needs at least 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, source.len(), n).into_vec();
    let chosen: Vec<_> = picks.iter().map(|&i| &source.examples[i]).collect();

    let mut meta = TriggerSourceMeta {
        source_split: source.name.clone(),
        source_content_sha256: source.content_hash(),
        ..TriggerSourceMeta::default()
    };
    let items = match sources {
        TriggerSources::Adversarial {
            surrogate, epsilon, ..
        } => {
            if surrogate.num_classes() != num_classes {
                return Err(Error::Config(format!(
                    "surrogate has {} outputs, task has {num_classes} classes",
                    surrogate.num_classes()
                )));
            }
            meta.epsilon = Some(epsilon);
            meta.surrogate_sha256 = Some(surrogate.content_hash()?);
            let images: Vec<&ImageTensor> = chosen.iter().map(|e| &e.image).collect();
            let labels: Vec<usize> = chosen.iter().map(|e| e.label).collect();
            let adv = fgsm_batch(surrogate, &images, &labels, epsilon)?;
            adv.into_iter()
                .zip(&chosen)
                .map(|(image, ex)| TriggerItem {
                    image,
                    assigned_label: wrong_label(&mut rng, ex.label, num_classes),
                    true_label: Some(ex.label),
                    clean_source: Some(ex.image.clone()),
                    origin: ex.origin,
                })
                .collect()
        }
        TriggerSources::Ood { foreign, task } => {
            let same_dataset = matches!(
                (split_dataset(foreign), split_dataset(task)),
                (Some(a), Some(b)) if a == b
            );
            if same_dataset || foreign.content_hash() == task.content_hash() {
                return Err(Error::Config(format!(
                    "OOD trigger source `{}` is the in-distribution dataset `{}`",
                    foreign.name, task.name
                )));
            }
            meta.foreign_dataset = split_dataset(foreign);
            chosen
                .iter()
                .map(|ex| TriggerItem {
                    image: ex.image.clone(),
                    assigned_label: rng.random_range(0..num_classes),
                    true_label: None,
                    clean_source: None,
                    origin: ex.origin,
                })
                .collect()
        }
        TriggerSources::RandomLabel { .. } => chosen
            .iter()
            .map(|ex| TriggerItem {
                image: ex.image.clone(),
                assigned_label: wrong_label(&mut rng, ex.label, num_classes),
                true_label: Some(ex.label),
                clean_source: None,
                origin: ex.origin,
            })
            .collect(),
    };
    let set = TriggerSet {
        items,
        trigger_type: kind,
        gen_seed: seed,
        num_classes,
        source_meta: meta,
    };
    set.validate()?;
    let key = VerificationKey::new(&set, DEFAULT_THRESHOLD)?;
    Ok((set, key))
}

#[derive(Serialize, Deserialize)]
struct ManifestItem {
    assigned_label: usize,
    true_label: Option<usize>,
    origin: Option<Origin>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    trigger_type: TriggerType,
    gen_seed: u64,
    num_classes: usize,
    source_meta: TriggerSourceMeta,
    content_sha256: String,
    items: Vec<ManifestItem>,
}

const IMAGES_FILE: &str = "images.safetensors";
const MANIFEST_FILE: &str = "manifest.json";

fn stack(images: impl Iterator<Item = impl AsRef<[f32]>>, n: usize) -> (Vec<usize>, Vec<f32>) {
    let mut v = Vec::with_capacity(n * IMAGE_LEN);
    for img in images {
        v.extend_from_slice(img.as_ref());
    }
    (vec![n, 3, 32, 32], v)
}

/// Writes `images.safetensors` and `manifest.json` into `dir`.
pub fn save_trigger_set(set: &TriggerSet, dir: &Path) -> Result<()> {
    let n = set.len();
    let mut arrays = F32Arrays::new();
    arrays.insert(
        "images".into(),
        stack(set.items.iter().map(|i| i.image.pixels()), n),
    );
    if set.trigger_type == TriggerType::Adversarial {
        let clean: Option<Vec<&ImageTensor>> =
            set.items.iter().map(|i| i.clean_source.as_ref()).collect();
        let clean = clean
            .ok_or_else(|| Error::Validation("adversarial item without clean source".into()))?;
        arrays.insert("clean".into(), stack(clean.iter().map(|c| c.pixels()), n));
    }
    util::write_f32_arrays(&dir.join(IMAGES_FILE), &arrays, HashMap::new())?;
    let manifest = Manifest {
        trigger_type: set.trigger_type,
        gen_seed: set.gen_seed,
        num_classes: set.num_classes,
        source_meta: set.source_meta.clone(),
        content_sha256: set.content_hash(),
        items: set
            .items
            .iter()
            .map(|i| ManifestItem {
                assigned_label: i.assigned_label,
                true_label: i.true_label,
                origin: i.origin,
            })
            .collect(),
    };
    util::write_json_atomic(&dir.join(MANIFEST_FILE), &manifest)
}

fn unstack(arrays: &mut F32Arrays, name: &str, n: usize, path: &Path) -> Result<Vec<ImageTensor>> {
    let (shape, vals) = arrays
        .remove(name)
        .ok_or_else(|| Error::ingestion(path, format!("missing array `{name}`")))?;
    if shape != [n, 3, 32, 32] {
        return Err(Error::ingestion(
            path,
            format!("array `{name}` has shape {shape:?}, expected [{n}, 3, 32, 32]"),
        ));
    }
    vals.chunks_exact(IMAGE_LEN)
        .map(|c| ImageTensor::new(c.to_vec()))
        .collect()
}

/// Reads an archive written by [`save_trigger_set`], checking its recorded hash.
pub fn load_trigger_set(dir: &Path) -> Result<TriggerSet> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest =
        util::read_json(&manifest_path).map_err(|e| Error::ingestion(&manifest_path, e))?;
    let images_path = dir.join(IMAGES_FILE);
    let (mut arrays, _) = util::read_f32_arrays(&images_path)?;
    let n = manifest.items.len();
    let images = unstack(&mut arrays, "images", n, &images_path)?;
    let clean: Vec<Option<ImageTensor>> = if manifest.trigger_type == TriggerType::Adversarial {
        unstack(&mut arrays, "clean", n, &images_path)?
            .into_iter()
            .map(Some)
            .collect()
    } else {
        vec![None; n]
    };
    let set = TriggerSet {
        items: images
            .into_iter()
            .zip(clean)
            .zip(&manifest.items)
            .map(|((image, clean_source), m)| TriggerItem {
                image,
                assigned_label: m.assigned_label,
                true_label: m.true_label,
                clean_source,
                origin: m.origin,
            })
            .collect(),
        trigger_type: manifest.trigger_type,
        gen_seed: manifest.gen_seed,
        num_classes: manifest.num_classes,
        source_meta: manifest.source_meta,
    };
    if set.content_hash() != manifest.content_sha256 {
        return Err(Error::ingestion(
            dir,
            "trigger archive content does not match its recorded hash",
        ));
    }
    set.validate()?;
    Ok(set)
}

/// Label histogram, for diagnostics.
pub fn label_histogram(set: &TriggerSet) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for i in &set.items {
        *h.entry(i.assigned_label).or_insert(0) += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabeledExample, Standardization};

    fn toy_split(name: &str, n: usize, k: usize, offset: f32) -> DatasetSplit {
        let examples = (0..n)
            .map(|i| {
                let v = ((i as f32 * 0.013 + offset) % 1.0).abs();
                LabeledExample::new(ImageTensor::filled(v), i % k)
            })
            .collect();
        DatasetSplit::new(name, examples, k, Standardization::default()).unwrap()
    }

    #[test]
    fn random_label_single_example_avoids_true_label() {
        let mut split = toy_split("one", 1, 10, 0.0);
        split.examples[0].label = 3;
        for seed in 0..50 {
            let (set, _) = key_generation(
                TriggerType::RandomLabel,
                1,
                seed,
                TriggerSources::RandomLabel { split: &split },
            )
            .unwrap();
            assert_ne!(set.items[0].assigned_label, 3);
            assert!(set.items[0].assigned_label < 10);
        }
    }

    #[test]
    fn wrong_label_is_uniform_over_others() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 10];
        for _ in 0..9000 {
            counts[wrong_label(&mut rng, 4, 10)] += 1;
        }
        assert_eq!(counts[4], 0);
        for (c, &n) in counts.iter().enumerate() {
            if c != 4 {
                assert!((800..1200).contains(&n), "class {c}: {n}");
            }
        }
    }

    #[test]
    fn ood_labels_in_task_range() {
        let task = toy_split("task", 50, 10, 0.0);
        let foreign = toy_split("foreign", 300, 100, 0.5);
        let (set, key) = key_generation(
            TriggerType::Ood,
            100,
            9,
            TriggerSources::Ood {
                foreign: &foreign,
                task: &task,
            },
        )
        .unwrap();
        assert_eq!(set.len(), 100);
        assert!(set.items.iter().all(|i| i.assigned_label < 10));
        assert_eq!(key.threshold, DEFAULT_THRESHOLD);
        assert_eq!(key.trigger_ref, set.content_hash());
    }

    #[test]
    fn ood_rejects_in_distribution_source() {
        let task = toy_split("task", 50, 10, 0.0);
        let r = key_generation(
            TriggerType::Ood,
            5,
            0,
            TriggerSources::Ood {
                foreign: &task,
                task: &task,
            },
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn too_many_triggers_rejected() {
        let split = toy_split("s", 5, 10, 0.0);
        let r = key_generation(
            TriggerType::RandomLabel,
            6,
            0,
            TriggerSources::RandomLabel { split: &split },
        );
        assert!(r.is_err());
    }

    #[test]
    fn mismatched_kind_rejected() {
        let split = toy_split("s", 5, 10, 0.0);
        let r = key_generation(
            TriggerType::Ood,
            2,
            0,
            TriggerSources::RandomLabel { split: &split },
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_hash() {
        let split = toy_split("s", 500, 10, 0.0);
        let gen = |seed| {
            key_generation(
                TriggerType::RandomLabel,
                100,
                seed,
                TriggerSources::RandomLabel { split: &split },
            )
            .unwrap()
            .0
            .content_hash()
        };
        assert_eq!(gen(5), gen(5));
        assert_ne!(gen(5), gen(6));
    }

    #[test]
    fn archive_round_trip() {
        let split = toy_split("s", 40, 10, 0.2);
        let (set, _) = key_generation(
            TriggerType::RandomLabel,
            12,
            3,
            TriggerSources::RandomLabel { split: &split },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_trigger_set(&set, dir.path()).unwrap();
        let back = load_trigger_set(dir.path()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn tampered_archive_rejected() {
        let split = toy_split("s", 40, 10, 0.2);
        let (set, _) = key_generation(
            TriggerType::RandomLabel,
            12,
            3,
            TriggerSources::RandomLabel { split: &split },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_trigger_set(&set, dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&p).unwrap();
        let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
        let first = &mut m["items"][0]["assigned_label"];
        let new = (first.as_u64().unwrap() + 1) % 10;
        *first = new.into();
        std::fs::write(&p, m.to_string()).unwrap();
        assert!(load_trigger_set(dir.path()).is_err());
    }

    #[test]
    fn threshold_outside_unit_interval_rejected() {
        let k = VerificationKey {
            trigger_ref: String::new(),
            threshold: 0.0,
        };
        assert!(k.validate().is_err());
        let k = VerificationKey {
            trigger_ref: String::new(),
            threshold: 1.5,
        };
        assert!(k.validate().is_err());
    }
}
