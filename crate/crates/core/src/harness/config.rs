use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{DatasetId, SplitKind};
use crate::defense::ood::PoolMode;
use crate::defense::randomlabel::{
    FeatureClassifierKind, WrapperPolicy, DEFAULT_C_GRID, DEFAULT_PARTIAL_EPOCHS,
};
use crate::error::{Error, Result};
use crate::model::{ArchId, ArchSpec, LossKind, TrainConfig};
use crate::util;
use crate::watermarking::{TriggerType, DEFAULT_EPSILON, DEFAULT_THRESHOLD, DEFAULT_TRIGGER_COUNT};

/// Environment variable overriding `data.root`.
pub const DATA_ROOT_ENV: &str = "WMGUARD_DATA_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub trigger: u64,
    pub denial: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
    pub task: DatasetId,
    /// Share of the task's train split available to the adversary.
    pub adversary_fraction: f64,
    /// Share of the task's train split used for marking.
    pub mark_fraction: f64,
    /// Share of each test split used for evaluation.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            task: DatasetId::Cifar10,
            adversary_fraction: 1.0 / 3.0,
            mark_fraction: 1.0,
            test_fraction: 1.0,
        }
    }
}

/// Optimizer settings for one training stage; the seed comes from `seeds.model`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub early_stopping_patience: Option<usize>,
    #[serde(default)]
    pub lr_schedule_on_eval_loss: bool,
}

impl TrainSettings {
    pub fn new(learning_rate: f64, batch_size: usize, epochs: usize) -> Self {
        TrainSettings {
            learning_rate,
            batch_size,
            epochs,
            early_stopping_patience: None,
            lr_schedule_on_eval_loss: false,
        }
    }

    pub fn to_config(&self, loss: LossKind, seed: u64) -> TrainConfig {
        TrainConfig {
            early_stopping_patience: self.early_stopping_patience,
            lr_schedule_on_eval_loss: self.lr_schedule_on_eval_loss,
            ..TrainConfig::new(loss, self.learning_rate, self.batch_size, self.epochs, seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageModel {
    pub arch: ArchId,
    #[serde(default = "one")]
    pub width_divisor: usize,
    pub train: TrainSettings,
}

fn one() -> usize {
    1
}

impl StageModel {
    fn new(arch: ArchId, lr: f64, batch: usize, epochs: usize) -> Self {
        StageModel {
            arch,
            width_divisor: 1,
            train: TrainSettings::new(lr, batch, epochs),
        }
    }

    pub fn spec(&self, num_outputs: usize) -> ArchSpec {
        ArchSpec::new(self.arch, num_outputs).with_width_divisor(self.width_divisor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerConfig {
    #[serde(rename = "type")]
    pub kind: TriggerType,
    pub n: usize,
    pub epsilon: f32,
    pub threshold: f64,
    /// OOD trigger source dataset.
    pub foreign: DatasetId,
    pub foreign_split: SplitKind,
    /// Task split that adversarial and random-label triggers are drawn from.
    pub source_split: SplitKind,
    /// Owner's model whose gradients perturb adversarial triggers.
    pub generator: StageModel,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig {
            kind: TriggerType::Adversarial,
            n: DEFAULT_TRIGGER_COUNT,
            epsilon: DEFAULT_EPSILON,
            threshold: DEFAULT_THRESHOLD,
            foreign: DatasetId::Cifar100,
            foreign_split: SplitKind::Test,
            source_split: SplitKind::Train,
            generator: StageModel::new(ArchId::Resnet18, 0.001, 128, 20),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarkConfig {
    pub model: StageModel,
    pub trigger_repeat: usize,
}

impl Default for MarkConfig {
    fn default() -> Self {
        MarkConfig {
            model: StageModel::new(ArchId::Resnet18, 0.001, 128, 30),
            trigger_repeat: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrapperKind {
    None,
    Adversarial,
    Ood,
    RandomLabel,
}

impl WrapperKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WrapperKind::None => "none",
            WrapperKind::Adversarial => "adversarial",
            WrapperKind::Ood => "ood",
            WrapperKind::RandomLabel => "random_label",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarialWrapperConfig {
    pub epsilon: f32,
    /// Adversary's stand-in classifier, trained on its data share.
    pub surrogate: StageModel,
    pub detector: StageModel,
    pub purifier: StageModel,
}

impl Default for AdversarialWrapperConfig {
    fn default() -> Self {
        AdversarialWrapperConfig {
            epsilon: DEFAULT_EPSILON,
            surrogate: StageModel::new(ArchId::Resnet18, 0.001, 128, 20),
            detector: StageModel::new(ArchId::Resnet18, 0.001, 128, 20),
            purifier: StageModel::new(ArchId::Autoencoder, 0.001, 128, 20),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodWrapperConfig {
    pub detector: StageModel,
    pub mode: PoolMode,
    /// Negative sources; CINIC-10 contributes only its non-CIFAR images.
    pub pool: Vec<DatasetId>,
    /// Removed from the pool in excluded mode.
    pub excluded_ids: Vec<DatasetId>,
    pub balance: f64,
}

impl Default for OodWrapperConfig {
    fn default() -> Self {
        OodWrapperConfig {
            detector: StageModel::new(ArchId::MobilenetV2, 0.01, 128, 20),
            mode: PoolMode::Diluted,
            pool: vec![DatasetId::Cifar100, DatasetId::Svhn, DatasetId::Cinic10],
            excluded_ids: vec![DatasetId::Cifar100],
            balance: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomLabelWrapperConfig {
    pub extractor: StageModel,
    pub partial_epochs: usize,
    /// Dataset whose adversary share trains the extractor and classifier.
    pub train_dataset: DatasetId,
    pub hook_layer: Option<String>,
    pub pca_fraction: Option<f64>,
    pub classifier: FeatureClassifierKind,
    pub c_grid: Vec<f64>,
    pub policy: WrapperPolicy,
}

impl Default for RandomLabelWrapperConfig {
    fn default() -> Self {
        RandomLabelWrapperConfig {
            extractor: StageModel::new(ArchId::Vgg16Bn, 0.01, 64, 50),
            partial_epochs: DEFAULT_PARTIAL_EPOCHS,
            train_dataset: DatasetId::Cifar10,
            hook_layer: None,
            pca_fraction: None,
            classifier: FeatureClassifierKind::Svm,
            c_grid: DEFAULT_C_GRID.to_vec(),
            policy: WrapperPolicy::Substitute,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WrapperConfig {
    pub kind: WrapperKind,
    /// Share of the adversary's data held out for detector and purifier metrics.
    pub heldout_fraction: f64,
    pub adversarial: AdversarialWrapperConfig,
    pub ood: OodWrapperConfig,
    pub random_label: RandomLabelWrapperConfig,
}

impl Default for WrapperConfig {
    fn default() -> Self {
        WrapperConfig {
            kind: WrapperKind::Adversarial,
            heldout_fraction: 0.2,
            adversarial: AdversarialWrapperConfig::default(),
            ood: OodWrapperConfig::default(),
            random_label: RandomLabelWrapperConfig::default(),
        }
    }
}

/// One experiment: mark a model with one trigger family, wrap it, evaluate both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub seeds: Seeds,
    pub data: DataConfig,
    pub trigger: TriggerConfig,
    pub mark: MarkConfig,
    pub wrapper: WrapperConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            out_dir: PathBuf::from("runs"),
            seeds: Seeds::default(),
            data: DataConfig::default(),
            trigger: TriggerConfig::default(),
            mark: MarkConfig::default(),
            wrapper: WrapperConfig::default(),
        }
    }
}

fn check_fraction(path: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::Schema {
            path: path.into(),
            reason: format!("must lie in (0, 1], got {v}"),
        });
    }
    Ok(())
}

fn check_train(path: &str, t: &TrainSettings) -> Result<()> {
    let bad = |field: &str, reason: &str| Error::Schema {
        path: format!("{path}.{field}"),
        reason: reason.into(),
    };
    if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
        return Err(bad("learning_rate", "must be > 0"));
    }
    if t.batch_size == 0 {
        return Err(bad("batch_size", "must be >= 1"));
    }
    if t.epochs == 0 {
        return Err(bad("epochs", "must be >= 1"));
    }
    if t.early_stopping_patience == Some(0) {
        return Err(bad("early_stopping_patience", "must be >= 1"));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML (or JSON for `.json` paths), applies `key=value` overrides,
    /// and validates. Unknown keys are schema errors naming their path.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        Self::parse(&text, is_json, overrides)
    }

    pub fn parse(text: &str, is_json: bool, overrides: &[String]) -> Result<Self> {
        let raw: Value = if is_json {
            serde_json::from_str(text).map_err(|e| Error::Schema {
                path: "<root>".into(),
                reason: e.to_string(),
            })?
        } else {
            let t: toml::Value = toml::from_str(text).map_err(|e| Error::Schema {
                path: "<root>".into(),
                reason: e.to_string(),
            })?;
            serde_json::to_value(t)?
        };
        let cfg = Self::from_value(raw)?;
        cfg.with_overrides(overrides)
    }

    fn from_value(v: Value) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_path_to_error::deserialize(v).map_err(|e| Error::Schema {
                path: e.path().to_string(),
                reason: e.inner().to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies dotted-key overrides; values parse as JSON literals, else strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::Schema {
                path: o.clone(),
                reason: "override must look like key.path=value".into(),
            })?;
            let value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut v;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::Schema {
                        path: key.to_string(),
                        reason: "no such key in the config schema".into(),
                    })?;
            }
            *slot = value;
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        check_fraction("data.adversary_fraction", self.data.adversary_fraction)?;
        check_fraction("data.mark_fraction", self.data.mark_fraction)?;
        check_fraction("data.test_fraction", self.data.test_fraction)?;
        if self.trigger.n == 0 {
            return Err(Error::Schema {
                path: "trigger.n".into(),
                reason: "must be >= 1".into(),
            });
        }
        if self.trigger.epsilon.is_nan() || self.trigger.epsilon < 0.0 {
            return Err(Error::Schema {
                path: "trigger.epsilon".into(),
                reason: "must be >= 0".into(),
            });
        }
        check_fraction("trigger.threshold", self.trigger.threshold)?;
        if self.trigger.kind == TriggerType::Ood && self.trigger.foreign == self.data.task {
            return Err(Error::Schema {
                path: "trigger.foreign".into(),
                reason: "OOD trigger source must differ from the task dataset".into(),
            });
        }
        if self.mark.trigger_repeat == 0 {
            return Err(Error::Schema {
                path: "mark.trigger_repeat".into(),
                reason: "must be >= 1".into(),
            });
        }
        check_train("trigger.generator.train", &self.trigger.generator.train)?;
        check_train("mark.model.train", &self.mark.model.train)?;
        let w = &self.wrapper;
        check_train(
            "wrapper.adversarial.surrogate.train",
            &w.adversarial.surrogate.train,
        )?;
        check_train(
            "wrapper.adversarial.detector.train",
            &w.adversarial.detector.train,
        )?;
        check_train(
            "wrapper.adversarial.purifier.train",
            &w.adversarial.purifier.train,
        )?;
        check_train("wrapper.ood.detector.train", &w.ood.detector.train)?;
        check_train(
            "wrapper.random_label.extractor.train",
            &w.random_label.extractor.train,
        )?;
        if !(w.heldout_fraction > 0.0 && w.heldout_fraction < 1.0) {
            return Err(Error::Schema {
                path: "wrapper.heldout_fraction".into(),
                reason: "must lie in (0, 1)".into(),
            });
        }
        if w.adversarial.purifier.arch != ArchId::Autoencoder {
            return Err(Error::Schema {
                path: "wrapper.adversarial.purifier.arch".into(),
                reason: "purifier must be the autoencoder".into(),
            });
        }
        if !(w.ood.balance > 0.0 && w.ood.balance.is_finite()) {
            return Err(Error::Schema {
                path: "wrapper.ood.balance".into(),
                reason: "must be > 0".into(),
            });
        }
        if w.ood.pool.is_empty() {
            return Err(Error::Schema {
                path: "wrapper.ood.pool".into(),
                reason: "must name at least one dataset".into(),
            });
        }
        let rl = &w.random_label;
        if rl.partial_epochs == 0 || rl.partial_epochs > rl.extractor.train.epochs {
            return Err(Error::Schema {
                path: "wrapper.random_label.partial_epochs".into(),
                reason: format!("must lie in 1..={}", rl.extractor.train.epochs),
            });
        }
        if let Some(f) = rl.pca_fraction {
            check_fraction("wrapper.random_label.pca_fraction", f)?;
        }
        for (i, &c) in rl.c_grid.iter().enumerate() {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Schema {
                    path: format!("wrapper.random_label.c_grid[{i}]"),
                    reason: "must be > 0".into(),
                });
            }
        }
        if rl.c_grid.is_empty() {
            return Err(Error::Schema {
                path: "wrapper.random_label.c_grid".into(),
                reason: "must not be empty".into(),
            });
        }
        Ok(())
    }

    /// Dataset root, with the environment override applied.
    pub fn data_root(&self) -> PathBuf {
        std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.data.root.clone())
    }

    pub fn canonical_json(&self) -> Result<String> {
        util::canonical_json(self)
    }

    pub fn config_hash(&self) -> Result<String> {
        util::canonical_hash(self)
    }
}
