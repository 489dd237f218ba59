//! Random-label wrapper: a partially trained network embeds each query and a
//! shallow feature-space classifier supplies the returned label.

mod kmeans;
mod pca;
mod svm;

pub use kmeans::{
    cluster_label_map, contingency, hungarian_max, kmeans, kmeans_hungarian_accuracy, KMeans,
};
pub use pca::{components_for_fraction, fit_pca, PCAProjection};
pub use svm::{fit_svm, scale_gamma, top_ranked, PairMachine, SvmModel};

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, ImageTensor};
use crate::error::{Error, Result};
use crate::metrics::Classifier;
use crate::model::{
    build_model, load_checkpoint, save_checkpoint, train, ArchId, ArchSpec, FeatureMatrix,
    TrainConfig, TrainedModel,
};
use crate::util::{self, F32Arrays};

pub const CV_FOLDS: usize = 5;
pub const DEFAULT_C_GRID: [f64; 3] = [0.1, 1.0, 10.0];
pub const DEFAULT_PARTIAL_EPOCHS: usize = 15;

/// A classifier trained short of convergence, used only as an embedding.
#[derive(Debug)]
pub struct PartialExtractor {
    pub model: TrainedModel,
    pub hook_layer: String,
    pub epochs_trained: usize,
    pub epoch_budget: usize,
}

impl PartialExtractor {
    pub fn extract(&self, images: &[&ImageTensor]) -> Result<FeatureMatrix> {
        self.model.extract_features(&self.hook_layer, images)
    }
}

/// Trains on correct labels for `partial_epochs` of the `cfg.epochs` budget.
/// The hook defaults to the network's second-to-last convolution.
pub fn train_partial_extractor(
    arch: &ArchSpec,
    train_split: &DatasetSplit,
    cfg: &TrainConfig,
    partial_epochs: usize,
    hook_layer: Option<&str>,
    model_seed: u64,
) -> Result<PartialExtractor> {
    cfg.validate()?;
    if partial_epochs == 0 {
        return Err(Error::Validation("partial_epochs must be >= 1".into()));
    }
    if partial_epochs > cfg.epochs {
        return Err(Error::Validation(format!(
            "partial_epochs {partial_epochs} exceeds the {}-epoch budget",
            cfg.epochs
        )));
    }
    if partial_epochs == cfg.epochs {
        log::warn!("partial extractor trained for the full epoch budget");
    }
    let model = build_model(arch, model_seed)?;
    let hook = match hook_layer {
        Some(h) => h.to_string(),
        None => model.penultimate_conv_layer()?,
    };
    if !model.layer_ids().contains(&hook) {
        return Err(Error::Config(format!(
            "unknown hook layer `{hook}`; valid layers: {}",
            model.layer_ids().join(", ")
        )));
    }
    let partial = TrainConfig {
        epochs: partial_epochs,
        early_stopping_patience: None,
        ..cfg.clone()
    };
    let empty = train_split.subset(format!("{}-none", train_split.name), &[]);
    let model = train(model, train_split, &empty, &partial)?;
    Ok(PartialExtractor {
        epochs_trained: model.history.len(),
        epoch_budget: cfg.epochs,
        model,
        hook_layer: hook,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureClassifierKind {
    Svm,
    Kmeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureModel {
    Svm(SvmModel),
    /// Centroids plus the cluster → label map.
    Kmeans {
        model: KMeans,
        label_of: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub c: Option<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureClassifier {
    pub kind: FeatureClassifierKind,
    pub model: FeatureModel,
    pub cv_accuracy: f64,
    pub cv_std: f64,
    pub cv_folds: usize,
    /// Every CV run; for SVMs, one entry per candidate C.
    pub cv_results: Vec<CvResult>,
}

impl FeatureClassifier {
    /// Candidate labels per row, best first.
    pub fn ranked(&self, x: &FeatureMatrix) -> Result<Vec<Vec<usize>>> {
        match &self.model {
            FeatureModel::Svm(m) => Ok(m.votes(x)?.iter().map(|v| top_ranked(v)).collect()),
            FeatureModel::Kmeans { model, label_of } => Ok(model
                .ranked(x)
                .into_iter()
                .map(|r| r.into_iter().map(|c| label_of[c]).collect())
                .collect()),
        }
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<usize>> {
        Ok(self.ranked(x)?.into_iter().map(|r| r[0]).collect())
    }
}

fn row_cmp(x: &FeatureMatrix, a: usize, b: usize) -> Ordering {
    x.row(a)
        .iter()
        .zip(x.row(b))
        .map(|(p, q)| p.total_cmp(q))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Rows sorted by (label, feature values), so fold assignment and fitting
/// depend only on the multiset of examples.
fn canonical_order(x: &FeatureMatrix, labels: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.rows).collect();
    idx.sort_by(|&a, &b| labels[a].cmp(&labels[b]).then_with(|| row_cmp(x, a, b)));
    idx
}

/// Stratified fold id per row: each class's rows are shuffled and dealt
/// round-robin. Requires `folds` examples of every present class.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0; labels.len()];
    for (offset, (class, mut rows)) in by_class.into_iter().enumerate() {
        if rows.len() < folds {
            return Err(Error::Validation(format!(
                "class {class} has {} examples; every one of {folds} folds needs at least one",
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        for (j, r) in rows.into_iter().enumerate() {
            fold_of[r] = (j + offset) % folds;
        }
    }
    Ok(fold_of)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn accuracy_of(preds: &[usize], labels: &[usize]) -> f64 {
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
}

fn fit_kind(
    kind: FeatureClassifierKind,
    x: &FeatureMatrix,
    labels: &[usize],
    num_classes: usize,
    c: f64,
    seed: u64,
) -> Result<FeatureModel> {
    match kind {
        FeatureClassifierKind::Svm => Ok(FeatureModel::Svm(fit_svm(
            x,
            labels,
            num_classes,
            c,
            scale_gamma(x),
        )?)),
        FeatureClassifierKind::Kmeans => {
            let model = kmeans(x, num_classes, seed)?;
            let label_of = cluster_label_map(&model.assign(x), labels, num_classes);
            Ok(FeatureModel::Kmeans { model, label_of })
        }
    }
}

fn predict_model(model: &FeatureModel, x: &FeatureMatrix) -> Result<Vec<usize>> {
    match model {
        FeatureModel::Svm(m) => m.predict(x),
        FeatureModel::Kmeans { model, label_of } => {
            Ok(model.assign(x).into_iter().map(|c| label_of[c]).collect())
        }
    }
}

/// 5-fold stratified CV accuracy of `kind` with parameter `c`.
pub fn cross_validate(
    kind: FeatureClassifierKind,
    x: &FeatureMatrix,
    labels: &[usize],
    num_classes: usize,
    c: f64,
    fold_seed: u64,
) -> Result<(f64, f64)> {
    let order = canonical_order(x, labels);
    let xs = x.select_rows(&order);
    let ls: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    let fold_of = stratified_folds(&ls, CV_FOLDS, fold_seed)?;
    let mut accs = Vec::with_capacity(CV_FOLDS);
    for f in 0..CV_FOLDS {
        let (test, tr): (Vec<usize>, Vec<usize>) = (0..xs.rows).partition(|&i| fold_of[i] == f);
        let tr_labels: Vec<usize> = tr.iter().map(|&i| ls[i]).collect();
        let te_labels: Vec<usize> = test.iter().map(|&i| ls[i]).collect();
        let model = fit_kind(
            kind,
            &xs.select_rows(&tr),
            &tr_labels,
            num_classes,
            c,
            fold_seed,
        )?;
        let preds = predict_model(&model, &xs.select_rows(&test))?;
        accs.push(accuracy_of(&preds, &te_labels));
    }
    Ok(mean_std(&accs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureClassifierConfig {
    pub kind: FeatureClassifierKind,
    /// SVM regularization candidates; the best 5-fold mean wins.
    pub c_grid: Vec<f64>,
    pub fold_seed: u64,
}

impl Default for FeatureClassifierConfig {
    fn default() -> Self {
        FeatureClassifierConfig {
            kind: FeatureClassifierKind::Svm,
            c_grid: DEFAULT_C_GRID.to_vec(),
            fold_seed: 0,
        }
    }
}

/// Fits the feature classifier on (optionally projected) features, recording
/// 5-fold CV accuracy on the same pool.
pub fn train_feature_classifier(
    features: &FeatureMatrix,
    labels: &[usize],
    num_classes: usize,
    projection: Option<&PCAProjection>,
    cfg: &FeatureClassifierConfig,
) -> Result<FeatureClassifier> {
    if features.rows != labels.len() {
        return Err(Error::Validation("feature/label count mismatch".into()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Validation(format!(
            "label {bad} outside 0..{num_classes}"
        )));
    }
    let projected;
    let x = match projection {
        Some(p) => {
            projected = p.project(features)?;
            &projected
        }
        None => features,
    };
    let candidates: Vec<Option<f64>> = match cfg.kind {
        FeatureClassifierKind::Svm => {
            if cfg.c_grid.is_empty() {
                return Err(Error::Config("c_grid is empty".into()));
            }
            cfg.c_grid.iter().map(|&c| Some(c)).collect()
        }
        FeatureClassifierKind::Kmeans => vec![None],
    };
    let mut cv_results = Vec::new();
    for c in candidates {
        let (mean, std) = cross_validate(
            cfg.kind,
            x,
            labels,
            num_classes,
            c.unwrap_or(1.0),
            cfg.fold_seed,
        )?;
        log::info!(
            "{:?} C={c:?}: 5-fold accuracy {mean:.4} ± {std:.4}",
            cfg.kind
        );
        cv_results.push(CvResult { c, mean, std });
    }
    let best = *cv_results
        .iter()
        .fold(None::<&CvResult>, |acc, r| match acc {
            Some(b) if b.mean >= r.mean => Some(b),
            _ => Some(r),
        })
        .ok_or_else(|| Error::Config("no classifier candidates".into()))?;
    let order = canonical_order(x, labels);
    let ls: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    let model = fit_kind(
        cfg.kind,
        &x.select_rows(&order),
        &ls,
        num_classes,
        best.c.unwrap_or(1.0),
        cfg.fold_seed,
    )?;
    Ok(FeatureClassifier {
        kind: cfg.kind,
        model,
        cv_accuracy: best.mean,
        cv_std: best.std,
        cv_folds: CV_FOLDS,
        cv_results,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WrapperPolicy {
    /// Always return the feature classifier's label.
    #[default]
    Substitute,
    /// Return the inner label when it is among the feature classifier's top two.
    Arbitrate,
}

pub struct RLWrappedModel<'a> {
    pub extractor: &'a PartialExtractor,
    pub projection: Option<&'a PCAProjection>,
    pub classifier: &'a FeatureClassifier,
    pub inner: &'a dyn Classifier,
    pub policy: WrapperPolicy,
}

impl RLWrappedModel<'_> {
    fn ranked(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<usize>>> {
        let f = self.extractor.extract(images)?;
        match self.projection {
            Some(p) => self.classifier.ranked(&p.project(&f)?),
            None => self.classifier.ranked(&f),
        }
    }
}

impl Classifier for RLWrappedModel<'_> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn classify(&self, images: &[&ImageTensor]) -> Result<Vec<usize>> {
        let ranked = self.ranked(images)?;
        match self.policy {
            WrapperPolicy::Substitute => Ok(ranked.into_iter().map(|r| r[0]).collect()),
            WrapperPolicy::Arbitrate => {
                let inner = self.inner.classify(images)?;
                Ok(ranked
                    .into_iter()
                    .zip(inner)
                    .map(|(r, i)| {
                        if r.iter().take(2).any(|&c| c == i) {
                            i
                        } else {
                            r[0]
                        }
                    })
                    .collect())
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    inner_sha256: String,
    extractor_sha256: String,
    hook_layer: String,
    epochs_trained: usize,
    epoch_budget: usize,
    projection: Option<ProjectionMeta>,
    classifier: FeatureClassifier,
    policy: WrapperPolicy,
    config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ProjectionMeta {
    dim: usize,
    variance_fraction_requested: f64,
    n_components_kept: usize,
    explained_variance_ratio: Vec<f64>,
}

/// Writes extractor checkpoint, projection matrices and classifier parameters.
pub fn save_rl_bundle(
    dir: &Path,
    extractor: &PartialExtractor,
    projection: Option<&PCAProjection>,
    classifier: &FeatureClassifier,
    policy: WrapperPolicy,
    inner_sha256: &str,
    config: serde_json::Value,
) -> Result<()> {
    let extractor_sha256 = save_checkpoint(
        &extractor.model,
        &dir.join("extractor.safetensors"),
        &BTreeMap::new(),
    )?;
    if let Some(p) = projection {
        let mut arrays = F32Arrays::new();
        arrays.insert(
            "mean".into(),
            (vec![p.dim], p.mean.iter().map(|&v| v as f32).collect()),
        );
        arrays.insert(
            "components".into(),
            (
                vec![p.n_components_kept, p.dim],
                p.components.iter().map(|&v| v as f32).collect(),
            ),
        );
        util::write_f32_arrays(&dir.join("projection.safetensors"), &arrays, HashMap::new())?;
    }
    let manifest = BundleManifest {
        inner_sha256: inner_sha256.to_string(),
        extractor_sha256,
        hook_layer: extractor.hook_layer.clone(),
        epochs_trained: extractor.epochs_trained,
        epoch_budget: extractor.epoch_budget,
        projection: projection.map(|p| ProjectionMeta {
            dim: p.dim,
            variance_fraction_requested: p.variance_fraction_requested,
            n_components_kept: p.n_components_kept,
            explained_variance_ratio: p.explained_variance_ratio.clone(),
        }),
        classifier: classifier.clone(),
        policy,
        config,
    };
    util::write_json_atomic(&dir.join("bundle.json"), &manifest)
}

pub struct RLBundle {
    pub extractor: PartialExtractor,
    pub projection: Option<PCAProjection>,
    pub classifier: FeatureClassifier,
    pub policy: WrapperPolicy,
}

pub fn load_rl_bundle(dir: &Path, inner_sha256: &str) -> Result<RLBundle> {
    let path = dir.join("bundle.json");
    let m: BundleManifest = util::read_json(&path).map_err(|e| Error::ingestion(&path, e))?;
    if m.inner_sha256 != inner_sha256 {
        return Err(Error::Validation(format!(
            "wrapper bundle covers model {} but {} was supplied",
            m.inner_sha256, inner_sha256
        )));
    }
    let (model, _) = load_checkpoint(&dir.join("extractor.safetensors"))?;
    if model.content_hash()? != m.extractor_sha256 {
        return Err(Error::ingestion(
            dir,
            "extractor checkpoint does not match its recorded hash",
        ));
    }
    let projection = match m.projection {
        Some(meta) => {
            let ppath = dir.join("projection.safetensors");
            let (mut arrays, _) = util::read_f32_arrays(&ppath)?;
            let mut take = |name: &str| {
                arrays
                    .remove(name)
                    .map(|(_, v)| v.into_iter().map(f64::from).collect::<Vec<f64>>())
                    .ok_or_else(|| Error::ingestion(&ppath, format!("missing array `{name}`")))
            };
            Some(PCAProjection {
                mean: take("mean")?,
                components: take("components")?,
                dim: meta.dim,
                variance_fraction_requested: meta.variance_fraction_requested,
                n_components_kept: meta.n_components_kept,
                explained_variance_ratio: meta.explained_variance_ratio,
            })
        }
        None => None,
    };
    Ok(RLBundle {
        extractor: PartialExtractor {
            model,
            hook_layer: m.hook_layer,
            epochs_trained: m.epochs_trained,
            epoch_budget: m.epoch_budget,
        },
        projection,
        classifier: m.classifier,
        policy: m.policy,
    })
}

/// Default extractor architecture.
pub fn default_extractor_arch(num_classes: usize) -> ArchSpec {
    ArchSpec::new(ArchId::Vgg16Bn, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(per_class: usize, k: usize) -> (FeatureMatrix, Vec<usize>) {
        let mut v = Vec::new();
        let mut l = Vec::new();
        for i in 0..per_class * k {
            let c = i % k;
            let t = (i / k) as f32 * 0.01;
            v.extend([c as f32 * 3.0 + t, -(c as f32) * 2.0 + t]);
            l.push(c);
        }
        (FeatureMatrix::new(per_class * k, 2, v).unwrap(), l)
    }

    #[test]
    fn separable_blobs_cv_is_perfect() {
        let (x, l) = blobs(10, 2);
        let fc =
            train_feature_classifier(&x, &l, 2, None, &FeatureClassifierConfig::default()).unwrap();
        assert_eq!(fc.cv_accuracy, 1.0);
        assert_eq!(fc.cv_folds, 5);
        assert_eq!(fc.cv_results.len(), 3);
    }

    #[test]
    fn class_smaller_than_fold_count_rejected() {
        let (x, mut l) = blobs(5, 2);
        l[0] = 1;
        let r = train_feature_classifier(&x, &l, 2, None, &FeatureClassifierConfig::default());
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn folds_are_stratified() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let folds = stratified_folds(&labels, 5, 7).unwrap();
        for f in 0..5 {
            for c in 0..5 {
                let n = (0..50).filter(|&i| folds[i] == f && labels[i] == c).count();
                assert_eq!(n, 2);
            }
        }
    }

    #[test]
    fn memorized_point_returns_its_label() {
        let x = FeatureMatrix::new(1, 2, vec![0.3, 0.7]).unwrap();
        let fc = FeatureClassifier {
            kind: FeatureClassifierKind::Kmeans,
            model: FeatureModel::Kmeans {
                model: KMeans {
                    k: 1,
                    dim: 2,
                    centroids: vec![0.3, 0.7],
                },
                label_of: vec![6],
            },
            cv_accuracy: 1.0,
            cv_std: 0.0,
            cv_folds: CV_FOLDS,
            cv_results: Vec::new(),
        };
        assert_eq!(fc.predict(&x).unwrap(), vec![6]);
    }

    #[test]
    fn partial_epochs_zero_rejected() {
        let split = DatasetSplit::new("e", Vec::new(), 10, Default::default()).unwrap();
        let cfg = TrainConfig::new(crate::model::LossKind::CrossEntropy, 0.01, 64, 50, 0);
        let arch = default_extractor_arch(10).with_width_divisor(16);
        let r = train_partial_extractor(&arch, &split, &cfg, 0, None, 0);
        assert!(matches!(r, Err(Error::Validation(_))));
        let r = train_partial_extractor(&arch, &split, &cfg, 51, None, 0);
        assert!(matches!(r, Err(Error::Validation(_))));
    }
}
