use serde::{Deserialize, Serialize};

use super::trigger::{TriggerSet, TriggerType};
use crate::data::{DatasetSplit, ImageTensor};
use crate::error::{Error, Result};
use crate::metrics::Classifier;
use crate::model::{
    build_model, train_on, ArchSpec, Targets, TrainConfig, TrainedModel, TrainingSet,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkingOptions {
    /// Copies of the full trigger set added to every epoch.
    pub trigger_repeat: usize,
    /// Weight-initialization seed.
    pub model_seed: u64,
}

impl Default for MarkingOptions {
    fn default() -> Self {
        MarkingOptions {
            trigger_repeat: 1,
            model_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkingMeta {
    /// Trigger examples per clean example in one epoch.
    pub mix_ratio: f64,
    pub epochs: usize,
    pub trigger_repeat: usize,
}

#[derive(Debug)]
pub struct WatermarkedModel {
    pub model: TrainedModel,
    pub trigger_type: TriggerType,
    pub marking_meta: MarkingMeta,
}

impl Classifier for WatermarkedModel {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn classify(&self, images: &[&ImageTensor]) -> Result<Vec<usize>> {
        self.model.predict_labels(images)
    }
}

/// Clean training examples followed by `repeat` copies of every trigger item.
pub fn marking_split<'a>(
    train: &'a DatasetSplit,
    triggers: &'a TriggerSet,
    repeat: usize,
) -> TrainingSet<'a> {
    let mut inputs = train.images();
    let mut labels = train.labels();
    for _ in 0..repeat {
        inputs.extend(triggers.images());
        labels.extend(triggers.assigned_labels());
    }
    TrainingSet {
        inputs,
        targets: Targets::Labels(labels),
    }
}

/// Trains `arch` from scratch on `train ∪ triggers`.
pub fn watermark_marking(
    arch: &ArchSpec,
    train: &DatasetSplit,
    eval: Option<&DatasetSplit>,
    triggers: &TriggerSet,
    cfg: &TrainConfig,
    opts: &MarkingOptions,
) -> Result<WatermarkedModel> {
    cfg.validate()?;
    if opts.trigger_repeat == 0 {
        return Err(Error::Config("trigger_repeat must be >= 1".into()));
    }
    if !arch.arch_id.is_classifier() {
        return Err(Error::Config(format!(
            "{} cannot be watermarked",
            arch.arch_id
        )));
    }
    if triggers.num_classes != train.num_classes || arch.num_outputs != train.num_classes {
        return Err(Error::Validation(format!(
            "class counts disagree: train {}, triggers {}, model {}",
            train.num_classes, triggers.num_classes, arch.num_outputs
        )));
    }
    triggers.validate()?;
    let model = build_model(arch, opts.model_seed)?;
    let set = marking_split(train, triggers, opts.trigger_repeat);
    let eval_set = match eval {
        Some(e) => TrainingSet::classification(e),
        None => TrainingSet {
            inputs: Vec::new(),
            targets: Targets::Labels(Vec::new()),
        },
    };
    let model = train_on(model, &set, &eval_set, Some(train.standardization), cfg)?;
    Ok(WatermarkedModel {
        marking_meta: MarkingMeta {
            mix_ratio: (triggers.len() * opts.trigger_repeat) as f64 / train.len().max(1) as f64,
            epochs: model.history.len(),
            trigger_repeat: opts.trigger_repeat,
        },
        model,
        trigger_type: triggers.trigger_type,
    })
}
