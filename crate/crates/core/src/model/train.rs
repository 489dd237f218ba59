use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, images_to_tensor, TrainedModel};
use crate::data::{DatasetSplit, ImageTensor, Standardization};
use crate::error::{Error, Result};
use crate::metrics::{binary_metrics, BinaryMetrics};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

fn adam() -> OptimizerKind {
    OptimizerKind::Adam
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    #[serde(default = "adam")]
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub early_stopping_patience: Option<usize>,
    #[serde(default)]
    pub lr_schedule_on_eval_loss: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(
        loss: LossKind,
        learning_rate: f64,
        batch_size: usize,
        epochs: usize,
        seed: u64,
    ) -> Self {
        TrainConfig {
            loss,
            optimizer: OptimizerKind::Adam,
            learning_rate,
            batch_size,
            epochs,
            early_stopping_patience: None,
            lr_schedule_on_eval_loss: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs < 1 {
            return Err(Error::Validation("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if self.early_stopping_patience == Some(0) {
            return Err(Error::Validation(
                "early_stopping_patience must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Non-improving epochs before the learning rate is cut by 10×.
    pub fn scheduler_patience(&self) -> usize {
        self.early_stopping_patience.map_or(2, |p| p.div_ceil(2))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub train_acc: Option<f64>,
    pub eval_acc: Option<f64>,
    /// Held-out precision/recall/F1 for two-output models (positive class 1).
    pub eval_binary: Option<BinaryMetrics>,
}

/// Supervision for one example set.
pub enum Targets<'a> {
    Labels(Vec<usize>),
    Images(Vec<&'a ImageTensor>),
}

pub struct TrainingSet<'a> {
    pub inputs: Vec<&'a ImageTensor>,
    pub targets: Targets<'a>,
}

impl<'a> TrainingSet<'a> {
    pub fn classification(split: &'a DatasetSplit) -> Self {
        TrainingSet {
            inputs: split.images(),
            targets: Targets::Labels(split.labels()),
        }
    }

    /// Identity reconstruction pairs x → x.
    pub fn identity(split: &'a DatasetSplit) -> Self {
        let images = split.images();
        TrainingSet {
            inputs: images.clone(),
            targets: Targets::Images(images),
        }
    }

    pub fn pairs(inputs: Vec<&'a ImageTensor>, targets: Vec<&'a ImageTensor>) -> Self {
        TrainingSet {
            inputs,
            targets: Targets::Images(targets),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn target_tensor(&self, idx: &[usize]) -> Result<Tensor> {
        match &self.targets {
            Targets::Labels(l) => {
                let v: Vec<u32> = idx.iter().map(|&i| l[i] as u32).collect();
                Ok(Tensor::from_vec(v, idx.len(), &Device::Cpu)?)
            }
            Targets::Images(t) => {
                let imgs: Vec<&ImageTensor> = idx.iter().map(|&i| t[i]).collect();
                images_to_tensor(&imgs)
            }
        }
    }
}

/// Trains a classifier on a labeled split (or an autoencoder on identity pairs).
pub fn train(
    model: TrainedModel,
    train_split: &DatasetSplit,
    eval_split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let (tr, ev) = if model.arch.arch_id.is_classifier() {
        (
            TrainingSet::classification(train_split),
            TrainingSet::classification(eval_split),
        )
    } else {
        (
            TrainingSet::identity(train_split),
            TrainingSet::identity(eval_split),
        )
    };
    train_on(model, &tr, &ev, Some(train_split.standardization), cfg)
}

fn check_targets(
    model: &TrainedModel,
    set: &TrainingSet,
    cfg: &TrainConfig,
    which: &str,
) -> Result<()> {
    match (&set.targets, model.arch.arch_id.is_classifier()) {
        (Targets::Labels(labels), true) => {
            if labels.len() != set.inputs.len() {
                return Err(Error::Validation(format!("{which}: label count mismatch")));
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= model.arch.num_outputs) {
                return Err(Error::Validation(format!(
                    "{which}: label {bad} out of range for {} outputs",
                    model.arch.num_outputs
                )));
            }
            if cfg.loss != LossKind::CrossEntropy {
                return Err(Error::Validation(
                    "classifiers train with cross_entropy".into(),
                ));
            }
        }
        (Targets::Images(t), false) => {
            if t.len() != set.inputs.len() {
                return Err(Error::Validation(format!("{which}: target count mismatch")));
            }
            if cfg.loss != LossKind::Mse {
                return Err(Error::Validation("autoencoders train with mse".into()));
            }
        }
        (Targets::Labels(_), false) => {
            return Err(Error::Type("autoencoder needs image targets".into()))
        }
        (Targets::Images(_), true) => {
            return Err(Error::Type("classifier needs label targets".into()))
        }
    }
    Ok(())
}

struct Pass {
    loss: f64,
    acc: Option<f64>,
    preds: Vec<usize>,
}

fn batch_loss(model: &TrainedModel, out: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(if model.arch.arch_id.is_classifier() {
        candle_nn::loss::cross_entropy(out, target)?
    } else {
        candle_nn::loss::mse(out, target)?
    })
}

fn evaluate(model: &TrainedModel, set: &TrainingSet, batch: usize) -> Result<Pass> {
    let mut total = 0.0;
    let mut correct = 0usize;
    let mut preds = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let imgs: Vec<&ImageTensor> = chunk.iter().map(|&i| set.inputs[i]).collect();
        let out = model.forward_tensor(&images_to_tensor(&imgs)?, false)?;
        let target = set.target_tensor(chunk)?;
        total += batch_loss(model, &out, &target)?.to_scalar::<f32>()? as f64 * chunk.len() as f64;
        if let Targets::Labels(labels) = &set.targets {
            for (row, &i) in out.to_vec2::<f32>()?.iter().zip(chunk) {
                let p = argmax(row);
                correct += usize::from(p == labels[i]);
                preds.push(p);
            }
        }
    }
    let n = set.len().max(1) as f64;
    Ok(Pass {
        loss: total / n,
        acc: matches!(set.targets, Targets::Labels(_)).then(|| correct as f64 / n),
        preds,
    })
}

/// General training loop over explicit (input, target) pairs.
///
/// With `early_stopping_patience = p`, stops after `p` consecutive epochs without
/// eval-loss improvement and restores the best-eval-loss weights. With
/// `lr_schedule_on_eval_loss`, multiplies the learning rate by 0.1 after
/// `ceil(p/2)` non-improving epochs.
pub fn train_on(
    mut model: TrainedModel,
    train_set: &TrainingSet,
    eval_set: &TrainingSet,
    standardization: Option<Standardization>,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    check_targets(&model, train_set, cfg, "train")?;
    check_targets(&model, eval_set, cfg, "eval")?;
    if !model.is_trained() {
        if let Some(s) = standardization {
            model.standardization = s;
        }
    }

    let mut opt = AdamW::new(
        model.store().trainable(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, std::collections::BTreeMap<String, Tensor>, usize)> = None;
    let mut stale = 0usize;
    let mut stale_lr = 0usize;
    let start_epoch = model.history.len();
    let mut history = Vec::new();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<&ImageTensor> = chunk.iter().map(|&i| train_set.inputs[i]).collect();
            let x = images_to_tensor(&imgs)?;
            let out = model.forward_tensor(&x, true)?;
            let target = train_set.target_tensor(chunk)?;
            let loss = batch_loss(&model, &out, &target)?;
            let lv = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !lv.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {lv} at epoch {} (lr {})",
                    start_epoch + epoch + 1,
                    opt.learning_rate()
                )));
            }
            opt.backward_step(&loss)?;
            loss_sum += lv * chunk.len() as f64;
            if let Targets::Labels(labels) = &train_set.targets {
                for (row, &i) in out.to_vec2::<f32>()?.iter().zip(chunk) {
                    correct += usize::from(argmax(row) == labels[i]);
                }
            }
        }
        let n = train_set.len() as f64;
        let train_loss = loss_sum / n;
        let train_acc = matches!(train_set.targets, Targets::Labels(_)).then(|| correct as f64 / n);
        let (eval_loss, eval_acc, eval_binary) = if eval_set.is_empty() {
            (train_loss, None, None)
        } else {
            let pass = evaluate(&model, eval_set, cfg.batch_size.max(64))?;
            let binary = match (&eval_set.targets, model.arch.num_outputs) {
                (Targets::Labels(labels), 2) => Some(binary_metrics(&pass.preds, labels)?),
                _ => None,
            };
            (pass.loss, pass.acc, binary)
        };
        if !eval_loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite eval loss at epoch {}",
                epoch + 1
            )));
        }
        let record = EpochRecord {
            epoch: start_epoch + epoch + 1,
            learning_rate: opt.learning_rate(),
            train_loss,
            eval_loss,
            train_acc,
            eval_acc,
            eval_binary,
        };
        log::debug!("epoch {:?}", record);
        history.push(record);

        let improved = best.as_ref().is_none_or(|(b, _, _)| eval_loss < *b);
        if improved {
            stale = 0;
            stale_lr = 0;
            if cfg.early_stopping_patience.is_some() {
                best = Some((eval_loss, model.store().snapshot()?, history.len()));
            } else {
                best = Some((eval_loss, Default::default(), history.len()));
            }
        } else {
            stale += 1;
            stale_lr += 1;
        }
        if cfg.lr_schedule_on_eval_loss && stale_lr >= cfg.scheduler_patience() {
            opt.set_learning_rate(opt.learning_rate() * 0.1);
            stale_lr = 0;
        }
        if let Some(p) = cfg.early_stopping_patience {
            if stale >= p {
                break;
            }
        }
    }

    if cfg.early_stopping_patience.is_some() {
        if let Some((_, snap, _)) = &best {
            model.store().restore(snap)?;
        }
    }
    model.history.extend(history);
    model.config = Some(cfg.clone());
    Ok(model)
}
