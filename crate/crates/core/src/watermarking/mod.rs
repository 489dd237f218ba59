//! Backdoor watermarking: key generation over three trigger families, marking
//! by joint training, and verification against a trigger set.

mod fgsm;
mod marking;
mod trigger;

pub use fgsm::{fgsm_batch, fgsm_perturb, input_gradient};
pub use marking::{
    marking_split, watermark_marking, MarkingMeta, MarkingOptions, WatermarkedModel,
};
pub use trigger::{
    key_generation, label_histogram, load_trigger_set, save_trigger_set, TriggerItem, TriggerSet,
    TriggerSourceMeta, TriggerSources, TriggerType, VerificationKey, DEFAULT_EPSILON,
    DEFAULT_THRESHOLD, DEFAULT_TRIGGER_COUNT,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Classifier;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub bit: u8,
    pub trigger_accuracy: f64,
    pub threshold: f64,
}

/// Fraction of trigger items on which `model` returns the assigned label; the
/// bit is 1 iff that fraction reaches the key's threshold.
pub fn watermark_verification(
    model: &dyn Classifier,
    triggers: &TriggerSet,
    vkey: &VerificationKey,
) -> Result<Verification> {
    vkey.validate()?;
    let hash = triggers.content_hash();
    if hash != vkey.trigger_ref {
        return Err(Error::Key(format!(
            "verification key refers to trigger set {} but {} was supplied",
            vkey.trigger_ref, hash
        )));
    }
    if triggers.is_empty() {
        return Err(Error::Validation("trigger set is empty".into()));
    }
    let preds = model.classify(&triggers.images())?;
    let hits = preds
        .iter()
        .zip(&triggers.items)
        .filter(|(p, item)| **p == item.assigned_label)
        .count();
    let trigger_accuracy = hits as f64 / triggers.len() as f64;
    Ok(Verification {
        bit: u8::from(trigger_accuracy >= vkey.threshold),
        trigger_accuracy,
        threshold: vkey.threshold,
    })
}
