//! Accuracy and binary detection metrics.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, ImageTensor};
use crate::error::{Error, Result};

/// Anything that maps images to class labels: plain models, marked models, wrappers.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    fn classify(&self, images: &[&ImageTensor]) -> Result<Vec<usize>>;
}

impl Classifier for crate::model::TrainedModel {
    fn num_classes(&self) -> usize {
        self.arch.num_outputs
    }

    fn classify(&self, images: &[&ImageTensor]) -> Result<Vec<usize>> {
        self.predict_labels(images)
    }
}

/// Fraction of positions where `preds[i] == labels[i]`.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Validation(
            "accuracy of an empty set is undefined".into(),
        ));
    }
    if preds.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn eval_accuracy(model: &dyn Classifier, split: &DatasetSplit) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Validation(format!(
            "split `{}` is empty; accuracy is undefined",
            split.name
        )));
    }
    let preds = model.classify(&split.images())?;
    accuracy(&preds, &split.labels())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl BinaryMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        BinaryMetrics {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
        }
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.fn_ + self.tn;
        if n == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / n as f64
        }
    }
}

/// Precision/recall/F1 with class 1 as positive.
pub fn binary_metrics(preds: &[usize], labels: &[usize]) -> Result<BinaryMetrics> {
    if labels.is_empty() {
        return Err(Error::Validation(
            "binary metrics of an empty set are undefined".into(),
        ));
    }
    if preds.len() != labels.len() {
        return Err(Error::Validation("prediction/label count mismatch".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &l) in preds.iter().zip(labels) {
        if p > 1 || l > 1 {
            return Err(Error::Validation(format!(
                "non-binary label pair ({p}, {l})"
            )));
        }
        match (p, l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => tn += 1,
        }
    }
    Ok(BinaryMetrics::from_counts(tp, fp, fn_, tn))
}

pub fn eval_binary_metrics(
    detector: &dyn Classifier,
    split: &DatasetSplit,
) -> Result<BinaryMetrics> {
    if split.is_empty() {
        return Err(Error::Validation(format!(
            "split `{}` is empty",
            split.name
        )));
    }
    let preds = detector.classify(&split.images())?;
    binary_metrics(&preds, &split.labels())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_8_2_2() {
        let m = BinaryMetrics::from_counts(8, 2, 2, 0);
        assert!((m.precision - 0.8).abs() < 1e-12);
        assert!((m.recall - 0.8).abs() < 1e-12);
        assert!((m.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn f1_zero_when_no_positives_predicted() {
        let m = binary_metrics(&[0, 0, 0], &[1, 1, 0]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn perfect_predictions() {
        let m = binary_metrics(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_is_error() {
        assert!(accuracy(&[], &[]).is_err());
        assert!(binary_metrics(&[], &[]).is_err());
    }

    #[test]
    fn constant_class_on_balanced_split() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        assert!((accuracy(&[3; 100], &labels).unwrap() - 0.1).abs() < 1e-12);
    }
}
