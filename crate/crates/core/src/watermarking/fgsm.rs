//! Fast Gradient Sign Method in `[0,1]` pixel space.

use candle_core::{Device, Tensor, Var};

use crate::data::{ImageTensor, LabeledExample};
use crate::error::{Error, Result};
use crate::model::{images_to_tensor, tensor_to_images, TrainedModel};

/// Images per gradient computation.
const FGSM_BATCH: usize = 128;

/// `clip_[0,1](x + ε·sign(∇ₓ CE(model(x), y)))` for one example.
pub fn fgsm_perturb(
    model: &TrainedModel,
    example: &LabeledExample,
    epsilon: f32,
) -> Result<ImageTensor> {
    let mut out = fgsm_batch(model, &[&example.image], &[example.label], epsilon)?;
    Ok(out.remove(0))
}

/// Input gradient of the mean cross-entropy loss, one image per row.
pub fn input_gradient(
    model: &TrainedModel,
    images: &[&ImageTensor],
    labels: &[usize],
) -> Result<Tensor> {
    let x = Var::from_tensor(&images_to_tensor(images)?)?;
    let y = Tensor::from_vec(
        labels.iter().map(|&l| l as u32).collect::<Vec<_>>(),
        labels.len(),
        &Device::Cpu,
    )?;
    let logits = model.forward_tensor(x.as_tensor(), false)?;
    let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
    let grads = loss.backward()?;
    let g = grads
        .get(x.as_tensor())
        .ok_or_else(|| Error::Numerical("no gradient reached the input".into()))?
        .clone();
    let finite = g
        .flatten_all()?
        .to_vec1::<f32>()?
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::Numerical(format!(
            "non-finite input gradient (loss {})",
            loss.to_scalar::<f32>()?
        )));
    }
    Ok(g)
}

/// Batched FGSM. Gradients are taken in eval mode (BatchNorm running statistics).
pub fn fgsm_batch(
    model: &TrainedModel,
    images: &[&ImageTensor],
    labels: &[usize],
    epsilon: f32,
) -> Result<Vec<ImageTensor>> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!(
            "epsilon must be >= 0, got {epsilon}"
        )));
    }
    if images.len() != labels.len() {
        return Err(Error::Validation("image/label count mismatch".into()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= model.num_classes()) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for a {}-class model",
            model.num_classes()
        )));
    }
    if epsilon == 0.0 {
        return Ok(images.iter().map(|&i| i.clone()).collect());
    }
    let mut out = Vec::with_capacity(images.len());
    for (imgs, labs) in images.chunks(FGSM_BATCH).zip(labels.chunks(FGSM_BATCH)) {
        let g = input_gradient(model, imgs, labs)?;
        let x = images_to_tensor(imgs)?;
        let adv = (x + (g.sign()? * f64::from(epsilon))?)?.clamp(0f32, 1f32)?;
        out.extend(tensor_to_images(&adv)?);
    }
    Ok(out)
}
