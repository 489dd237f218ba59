//! Inference-time wrappers around a (possibly stolen) watermarked classifier.
//! Each wrapper exposes the same [`Classifier`](crate::metrics::Classifier)
//! interface as the model it covers and never modifies its weights.

pub mod adversarial;
pub mod ood;
pub mod randomlabel;

use crate::data::{DatasetSplit, ImageTensor, LabeledExample};
use crate::error::{Error, Result};
use crate::metrics::{eval_binary_metrics, BinaryMetrics, Classifier};
use crate::model::{build_model, train, ArchSpec, TrainConfig, TrainedModel};

/// Detector label for inputs that pass through untouched.
pub const PASS: usize = 1;
/// Detector label for inputs that get remediated.
pub const FLAG: usize = 0;

/// Binary detector used by the adversarial and OOD wrappers.
#[derive(Debug)]
pub struct BinaryDetector {
    pub model: TrainedModel,
    pub heldout: BinaryMetrics,
}

impl Classifier for BinaryDetector {
    fn num_classes(&self) -> usize {
        2
    }

    fn classify(&self, images: &[&ImageTensor]) -> Result<Vec<usize>> {
        self.model.predict_labels(images)
    }
}

/// Trains a 2-output classifier on a binary split and records held-out metrics.
pub(crate) fn train_binary_detector(
    arch: &ArchSpec,
    train_set: &DatasetSplit,
    heldout: &DatasetSplit,
    cfg: &TrainConfig,
    model_seed: u64,
) -> Result<BinaryDetector> {
    if arch.num_outputs != 2 || !arch.arch_id.is_classifier() {
        return Err(Error::Config(format!(
            "detector must be a 2-output classifier, got {} with {} outputs",
            arch.arch_id, arch.num_outputs
        )));
    }
    for split in [train_set, heldout] {
        if split.num_classes != 2 {
            return Err(Error::Validation(format!(
                "split `{}` is not binary ({} classes)",
                split.name, split.num_classes
            )));
        }
    }
    let model = train(build_model(arch, model_seed)?, train_set, heldout, cfg)?;
    let heldout = eval_binary_metrics(&model, heldout)?;
    Ok(BinaryDetector { model, heldout })
}

pub(crate) fn binary_split(
    name: String,
    positives: impl IntoIterator<Item = LabeledExample>,
    negatives: impl IntoIterator<Item = LabeledExample>,
    like: &DatasetSplit,
) -> Result<DatasetSplit> {
    let examples = positives
        .into_iter()
        .map(|e| LabeledExample { label: PASS, ..e })
        .chain(
            negatives
                .into_iter()
                .map(|e| LabeledExample { label: FLAG, ..e }),
        )
        .collect();
    DatasetSplit::new(name, examples, 2, like.standardization)
}
