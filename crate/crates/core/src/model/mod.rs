//! Architectures, training and inference.

mod autoencoder;
pub mod layers;
mod mobilenet;
pub mod params;
mod resnet;
mod train;
mod vgg;
mod vit;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, Standardization, IMAGE_LEN};
use crate::error::{Error, Result};
use layers::Tap;
use params::{ParamBuilder, ParamStore};

pub use train::{
    train, train_on, EpochRecord, LossKind, OptimizerKind, Targets, TrainConfig, TrainingSet,
};

/// Images per forward pass during inference.
pub const INFERENCE_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    Resnet18,
    Vgg16Bn,
    Vgg11,
    MobilenetV2,
    VitSmall,
    Autoencoder,
}

impl ArchId {
    pub const ALL: [ArchId; 6] = [
        ArchId::Resnet18,
        ArchId::Vgg16Bn,
        ArchId::Vgg11,
        ArchId::MobilenetV2,
        ArchId::VitSmall,
        ArchId::Autoencoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::Resnet18 => "resnet18",
            ArchId::Vgg16Bn => "vgg16_bn",
            ArchId::Vgg11 => "vgg11",
            ArchId::MobilenetV2 => "mobilenet_v2",
            ArchId::VitSmall => "vit_small",
            ArchId::Autoencoder => "autoencoder",
        }
    }

    pub fn is_classifier(self) -> bool {
        self != ArchId::Autoencoder
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown arch id `{s}`")))
    }
}

fn default_width_divisor() -> usize {
    1
}

/// Architecture choice. `width_divisor` shrinks every channel count; 1 is the
/// standard network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub arch_id: ArchId,
    #[serde(default)]
    pub num_outputs: usize,
    #[serde(default = "default_width_divisor")]
    pub width_divisor: usize,
}

impl ArchSpec {
    pub fn new(arch_id: ArchId, num_outputs: usize) -> Self {
        ArchSpec {
            arch_id,
            num_outputs,
            width_divisor: 1,
        }
    }

    pub fn autoencoder() -> Self {
        ArchSpec::new(ArchId::Autoencoder, 0)
    }

    pub fn with_width_divisor(mut self, d: usize) -> Self {
        self.width_divisor = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch_id.is_classifier() && self.num_outputs < 1 {
            return Err(Error::Config(format!(
                "{} needs num_outputs >= 1",
                self.arch_id
            )));
        }
        if self.width_divisor < 1 {
            return Err(Error::Config("width_divisor must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Network {
    ResNet18(resnet::ResNet18),
    Vgg(vgg::Vgg),
    MobileNetV2(mobilenet::MobileNetV2),
    Vit(vit::VisionTransformer),
    Autoencoder(autoencoder::Autoencoder),
}

impl Network {
    fn build(spec: &ArchSpec, pb: &mut ParamBuilder) -> Result<Self> {
        let (n, w) = (spec.num_outputs, spec.width_divisor);
        Ok(match spec.arch_id {
            ArchId::Resnet18 => Network::ResNet18(resnet::ResNet18::new(pb, n, w)?),
            ArchId::Vgg16Bn => Network::Vgg(vgg::Vgg::new(pb, vgg::VggDepth::Vgg16, n, w)?),
            ArchId::Vgg11 => Network::Vgg(vgg::Vgg::new(pb, vgg::VggDepth::Vgg11, n, w)?),
            ArchId::MobilenetV2 => Network::MobileNetV2(mobilenet::MobileNetV2::new(pb, n, w)?),
            ArchId::VitSmall => Network::Vit(vit::VisionTransformer::new(pb, n, w)?),
            ArchId::Autoencoder => Network::Autoencoder(autoencoder::Autoencoder::new(pb, w)?),
        })
    }

    fn forward(&self, x: &Tensor, train: bool, tap: &mut Tap) -> Result<Tensor> {
        match self {
            Network::ResNet18(m) => m.forward(x, train, tap),
            Network::Vgg(m) => m.forward(x, train, tap),
            Network::MobileNetV2(m) => m.forward(x, train, tap),
            Network::Vit(m) => m.forward(x, train, tap),
            Network::Autoencoder(m) => m.forward(x, train, tap),
        }
    }

    fn layer_ids(&self) -> Vec<String> {
        match self {
            Network::ResNet18(_) => resnet::ResNet18::layer_ids(),
            Network::Vgg(m) => m.layer_ids(),
            Network::MobileNetV2(_) => mobilenet::MobileNetV2::layer_ids(),
            Network::Vit(_) => vit::VisionTransformer::layer_ids(),
            Network::Autoencoder(_) => autoencoder::Autoencoder::layer_ids(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub logits: Vec<f32>,
}

/// Index of the largest logit; the first one wins ties.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Row-major activations, one row per input image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * dim {
            return Err(Error::Validation(format!(
                "feature matrix {rows}x{dim} needs {} values, got {}",
                rows * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature value".into()));
        }
        Ok(FeatureMatrix { rows, dim, values })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            rows: idx.len(),
            dim: self.dim,
            values,
        }
    }
}

pub fn images_to_tensor(images: &[&ImageTensor]) -> Result<Tensor> {
    let mut buf = Vec::with_capacity(images.len() * IMAGE_LEN);
    for img in images {
        buf.extend_from_slice(img.pixels());
    }
    Ok(Tensor::from_vec(
        buf,
        (images.len(), 3, 32, 32),
        &Device::Cpu,
    )?)
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ImageTensor>> {
    let n = t.dim(0)?;
    let flat = t.flatten_all()?.to_vec1::<f32>()?;
    (0..n)
        .map(|i| ImageTensor::new(flat[i * IMAGE_LEN..(i + 1) * IMAGE_LEN].to_vec()))
        .collect()
}

/// A network with its weights, preprocessing constants and training record.
///
/// Not `Clone`: copies would share weight storage. Use [`TrainedModel::duplicate`].
#[derive(Debug)]
pub struct TrainedModel {
    pub arch: ArchSpec,
    pub seed: u64,
    pub standardization: Standardization,
    pub history: Vec<EpochRecord>,
    pub config: Option<TrainConfig>,
    store: ParamStore,
    net: Network,
}

/// Deterministically initialized, untrained model.
pub fn build_model(spec: &ArchSpec, seed: u64) -> Result<TrainedModel> {
    spec.validate()?;
    let mut pb = ParamBuilder::new(seed);
    let net = Network::build(spec, &mut pb)?;
    Ok(TrainedModel {
        arch: *spec,
        seed,
        standardization: Standardization::default(),
        history: Vec::new(),
        config: None,
        store: pb.finish(),
        net,
    })
}

impl TrainedModel {
    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_outputs
    }

    pub fn is_trained(&self) -> bool {
        !self.history.is_empty()
    }

    pub fn content_hash(&self) -> Result<String> {
        self.store.content_hash()
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.net.layer_ids()
    }

    /// Independent copy with its own weight storage.
    pub fn duplicate(&self) -> Result<TrainedModel> {
        let mut copy = build_model(&self.arch, self.seed)?;
        copy.store.restore(&self.store.snapshot()?)?;
        copy.standardization = self.standardization;
        copy.history = self.history.clone();
        copy.config = self.config.clone();
        Ok(copy)
    }

    /// Differentiable forward on raw `[0,1]` pixels.
    pub fn forward_tensor(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let input = self.prepare(x)?;
        self.net.forward(&input, train, &mut Tap::none())
    }

    fn prepare(&self, x: &Tensor) -> Result<Tensor> {
        if self.arch.arch_id.is_classifier() {
            layers::standardize_input(x, &self.standardization.mean, &self.standardization.std)
        } else {
            Ok(x.clone())
        }
    }

    fn require_classifier(&self, op: &str) -> Result<()> {
        if !self.arch.arch_id.is_classifier() {
            return Err(Error::Type(format!(
                "{op} needs a classifier, got {}",
                self.arch.arch_id
            )));
        }
        Ok(())
    }

    fn require_layer(&self, layer_id: &str) -> Result<()> {
        let ids = self.layer_ids();
        if !ids.iter().any(|l| l == layer_id) {
            return Err(Error::Config(format!(
                "unknown layer `{layer_id}` for {}; valid layers: {}",
                self.arch.arch_id,
                ids.join(", ")
            )));
        }
        Ok(())
    }

    pub fn predict(&self, images: &[&ImageTensor]) -> Result<Vec<Prediction>> {
        self.require_classifier("predict")?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFERENCE_BATCH) {
            let logits = self.forward_tensor(&images_to_tensor(chunk)?, false)?;
            for row in logits.to_vec2::<f32>()? {
                out.push(Prediction {
                    label: argmax(&row),
                    logits: row,
                });
            }
        }
        Ok(out)
    }

    pub fn predict_labels(&self, images: &[&ImageTensor]) -> Result<Vec<usize>> {
        Ok(self.predict(images)?.into_iter().map(|p| p.label).collect())
    }

    /// Autoencoder reconstruction x̂ for each input image.
    pub fn reconstruct(&self, images: &[&ImageTensor]) -> Result<Vec<ImageTensor>> {
        if self.arch.arch_id.is_classifier() {
            return Err(Error::Type(format!(
                "reconstruct needs an autoencoder, got {}",
                self.arch.arch_id
            )));
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFERENCE_BATCH) {
            let y = self.forward_tensor(&images_to_tensor(chunk)?, false)?;
            out.extend(tensor_to_images(&y)?);
        }
        Ok(out)
    }

    /// Flattened activation of `layer_id`, captured by a hook during a full forward pass.
    pub fn extract_features(
        &self,
        layer_id: &str,
        images: &[&ImageTensor],
    ) -> Result<FeatureMatrix> {
        self.require_layer(layer_id)?;
        self.collect_rows(images, |x| {
            let mut tap = Tap::hook(layer_id);
            self.net.forward(x, false, &mut tap)?;
            tap.captured
                .ok_or_else(|| Error::Config(format!("layer `{layer_id}` was not reached")))
        })
    }

    /// Same activation as [`extract_features`](Self::extract_features), computed by
    /// stopping the network at `layer_id`.
    pub fn forward_truncated(
        &self,
        layer_id: &str,
        images: &[&ImageTensor],
    ) -> Result<FeatureMatrix> {
        self.require_layer(layer_id)?;
        self.collect_rows(images, |x| {
            let mut tap = Tap::truncate_at(layer_id);
            self.net.forward(x, false, &mut tap)
        })
    }

    fn collect_rows(
        &self,
        images: &[&ImageTensor],
        f: impl Fn(&Tensor) -> Result<Tensor>,
    ) -> Result<FeatureMatrix> {
        let mut values = Vec::new();
        let mut dim = 0;
        for chunk in images.chunks(INFERENCE_BATCH) {
            let x = self.prepare(&images_to_tensor(chunk)?)?;
            let act = f(&x)?.flatten_from(1)?;
            dim = act.dim(1)?;
            values.extend(act.flatten_all()?.to_vec1::<f32>()?);
        }
        FeatureMatrix::new(images.len(), dim, values)
    }

    /// Name of the VGG second-to-last convolution, the feature hook for the partial extractor.
    pub fn penultimate_conv_layer(&self) -> Result<String> {
        match &self.net {
            Network::Vgg(v) => Ok(v.penultimate_conv()),
            _ => Err(Error::Config(format!(
                "{} has no designated penultimate-conv hook",
                self.arch.arch_id
            ))),
        }
    }

    pub(crate) fn store(&self) -> &ParamStore {
        &self.store
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    arch: ArchSpec,
    seed: u64,
    standardization: Standardization,
    history: Vec<EpochRecord>,
    config: Option<TrainConfig>,
    #[serde(default)]
    extra: BTreeMap<String, String>,
}

/// Writes weights plus a self-describing header (arch, seed, preprocessing,
/// history, config and caller-supplied entries such as a config hash).
pub fn save_checkpoint(
    model: &TrainedModel,
    path: &Path,
    extra: &BTreeMap<String, String>,
) -> Result<String> {
    let snap = model.store.snapshot()?;
    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, t) in &snap {
        let bytes: Vec<u8> = t
            .flatten_all()?
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        blobs.push((name.clone(), t.dims().to_vec(), bytes));
    }
    let views = blobs
        .iter()
        .map(|(n, shape, bytes)| {
            safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Validation(format!("tensor `{n}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = CheckpointMeta {
        arch: model.arch,
        seed: model.seed,
        standardization: model.standardization,
        history: model.history.clone(),
        config: model.config.clone(),
        extra: extra.clone(),
    };
    let mut info = HashMap::new();
    info.insert("wmguard".to_string(), serde_json::to_string(&meta)?);
    let bytes = safetensors::serialize(views, Some(info))
        .map_err(|e| Error::Validation(format!("checkpoint serialization: {e}")))?;
    crate::util::write_bytes_atomic(path, &bytes)?;
    model.content_hash()
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainedModel, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::ingestion(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::ingestion(path, format!("invalid checkpoint: {e}")))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get("wmguard"))
        .ok_or_else(|| Error::ingestion(path, "checkpoint has no model header"))?;
    let meta: CheckpointMeta =
        serde_json::from_str(meta_json).map_err(|e| Error::ingestion(path, e))?;
    let st = safetensors::SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::ingestion(path, format!("invalid checkpoint: {e}")))?;
    let mut snap = BTreeMap::new();
    for (name, view) in st.tensors() {
        let vals: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        snap.insert(name, Tensor::from_vec(vals, view.shape(), &Device::Cpu)?);
    }
    let mut model = build_model(&meta.arch, meta.seed)?;
    model.store.restore(&snap)?;
    model.standardization = meta.standardization;
    model.history = meta.history;
    model.config = meta.config;
    Ok((model, meta.extra))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f32) -> ImageTensor {
        ImageTensor::new(
            (0..IMAGE_LEN)
                .map(|i| ((i as f32 * 0.37 + v) % 1.0).abs())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn argmax_picks_largest() {
        assert_eq!(argmax(&[0.1, 2.3, -1.0, 0.5]), 1);
    }

    #[test]
    fn output_width_matches_num_outputs() {
        for arch in [
            ArchId::Resnet18,
            ArchId::Vgg11,
            ArchId::MobilenetV2,
            ArchId::VitSmall,
        ] {
            let m = build_model(&ArchSpec::new(arch, 2).with_width_divisor(16), 1).unwrap();
            let p = m.predict(&[&img(0.2)]).unwrap();
            assert_eq!(p[0].logits.len(), 2, "{arch}");
        }
    }

    #[test]
    fn autoencoder_shape_and_type_errors() {
        let ae = build_model(&ArchSpec::autoencoder().with_width_divisor(8), 1).unwrap();
        let out = ae.reconstruct(&[&img(0.3)]).unwrap();
        assert_eq!(out[0].pixels().len(), IMAGE_LEN);
        assert!(matches!(ae.predict(&[&img(0.3)]), Err(Error::Type(_))));
    }

    #[test]
    fn empty_batch_predicts_nothing() {
        let m = build_model(
            &ArchSpec::new(ArchId::Resnet18, 10).with_width_divisor(16),
            1,
        )
        .unwrap();
        assert!(m.predict(&[]).unwrap().is_empty());
    }

    #[test]
    fn unknown_layer_lists_valid_ids() {
        let m = build_model(&ArchSpec::new(ArchId::Vgg11, 10).with_width_divisor(16), 1).unwrap();
        match m.extract_features("conv99", &[&img(0.1)]) {
            Err(Error::Config(msg)) => assert!(msg.contains("conv1") && msg.contains("fc")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn vgg16_penultimate_conv_is_conv12() {
        let m = build_model(
            &ArchSpec::new(ArchId::Vgg16Bn, 10).with_width_divisor(16),
            1,
        )
        .unwrap();
        assert_eq!(m.penultimate_conv_layer().unwrap(), "conv12");
    }

    #[test]
    fn unknown_arch_is_config_error() {
        assert!(matches!("lenet".parse::<ArchId>(), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(
            &ArchSpec::new(ArchId::Resnet18, 3).with_width_divisor(16),
            9,
        )
        .unwrap();
        let mut extra = BTreeMap::new();
        extra.insert("config_hash".to_string(), "abc".to_string());
        let path = dir.path().join("m.safetensors");
        let h = save_checkpoint(&m, &path, &extra).unwrap();
        let (back, extra_back) = load_checkpoint(&path).unwrap();
        assert_eq!(back.content_hash().unwrap(), h);
        assert_eq!(extra_back, extra);
        assert_eq!(back.arch, m.arch);
    }
}
