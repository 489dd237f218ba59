//! Building blocks shared by the architectures.

use candle_core::{DType, Tensor, Var, D};

use super::params::ParamBuilder;
use crate::error::Result;

/// Records named intermediate activations, or stops the forward pass at one.
pub struct Tap<'a> {
    target: Option<&'a str>,
    truncate: bool,
    pub captured: Option<Tensor>,
    pub seen: Vec<String>,
}

impl<'a> Tap<'a> {
    pub fn none() -> Self {
        Tap {
            target: None,
            truncate: false,
            captured: None,
            seen: Vec::new(),
        }
    }

    /// Capture `layer` during a full forward pass.
    pub fn hook(layer: &'a str) -> Self {
        Tap {
            target: Some(layer),
            truncate: false,
            captured: None,
            seen: Vec::new(),
        }
    }

    /// Stop the forward pass right after `layer`.
    pub fn truncate_at(layer: &'a str) -> Self {
        Tap {
            target: Some(layer),
            truncate: true,
            captured: None,
            seen: Vec::new(),
        }
    }

    /// Returns true when the caller must return `x` immediately.
    pub fn visit(&mut self, name: &str, x: &Tensor) -> bool {
        self.seen.push(name.to_string());
        if self.target == Some(name) {
            self.captured = Some(x.clone());
            return self.truncate;
        }
        false
    }
}

/// Returns early from a forward function when the tap asks to truncate.
macro_rules! tap {
    ($tap:expr, $name:expr, $x:expr) => {
        if $tap.visit(&$name, &$x) {
            return Ok($x);
        }
    };
}
pub(crate) use tap;

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        pb.scoped(name, |pb| {
            let fan_in = c_in * kernel * kernel;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = pb.uniform("weight", &[c_out, c_in, kernel, kernel], bound)?;
            let bias = if bias {
                Some(pb.uniform("bias", &[c_out], bound)?)
            } else {
                None
            };
            Ok(Conv2d {
                weight,
                bias,
                stride,
                padding,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

/// 3×3 depthwise convolution written as nine shifted multiply-adds; avoids
/// splitting into one convolution per channel.
#[derive(Clone, Debug)]
pub struct DepthwiseConv3x3 {
    weight: Tensor,
    stride: usize,
}

impl DepthwiseConv3x3 {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, stride: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            let weight = pb.uniform("weight", &[channels, 1, 3, 3], 1.0 / 3.0)?;
            Ok(DepthwiseConv3x3 { weight, stride })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut acc: Option<Tensor> = None;
        for i in 0..3 {
            for j in 0..3 {
                let window = padded.narrow(2, i, h)?.narrow(3, j, w)?;
                let k = self
                    .weight
                    .narrow(2, i, 1)?
                    .narrow(3, j, 1)?
                    .reshape((1, c, 1, 1))?;
                let term = window.broadcast_mul(&k)?;
                acc = Some(match acc {
                    Some(a) => (a + term)?,
                    None => term,
                });
            }
        }
        let y = acc.expect("3x3 kernel has taps");
        if self.stride == 2 {
            // keep even rows/cols: matches padding=1, stride=2 output positions
            let y = y.reshape((n, c, h / 2, 2, w / 2, 2))?;
            Ok(y.narrow(3, 0, 1)?
                .narrow(5, 0, 1)?
                .reshape((n, c, h / 2, w / 2))?)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(BatchNorm2d {
                weight: pb.constant("weight", &[channels], 1.0)?,
                bias: pb.constant("bias", &[channels], 0.0)?,
                running_mean: pb.buffer("running_mean", &[channels], 0.0)?,
                running_var: pb.buffer("running_var", &[channels], 1.0)?,
                momentum: 0.1,
                eps: 1e-5,
            })
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if train {
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered
                .sqr()?
                .mean_keepdim(0)?
                .mean_keepdim(2)?
                .mean_keepdim(3)?;
            let count = (x.elem_count() / c) as f64;
            let unbiased = if count > 1.0 {
                count / (count - 1.0)
            } else {
                1.0
            };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_detached_tensor().reshape(shape)?,
                self.running_var.as_detached_tensor().reshape(shape)?,
            )
        };
        let xn = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&self.weight.reshape(shape)?)?
            .broadcast_add(&self.bias.reshape(shape)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            let bound = 1.0 / (d_in as f64).sqrt();
            Ok(Linear {
                weight: pb.uniform("weight", &[d_out, d_in], bound)?,
                bias: pb.uniform("bias", &[d_out], bound)?,
            })
        })
    }

    /// Accepts (N, d_in) or (N, T, d_in).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.t()?;
        let y = match x.rank() {
            2 => x.matmul(&w)?,
            _ => x.broadcast_matmul(&w)?,
        };
        Ok(y.broadcast_add(&self.bias)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(LayerNorm {
                weight: pb.constant("weight", &[dim], 1.0)?,
                bias: pb.constant("bias", &[dim], 0.0)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Subtracts per-channel mean and divides by std: the first op of every classifier.
pub fn standardize_input(x: &Tensor, mean: &[f32; 3], std: &[f32; 3]) -> Result<Tensor> {
    let dev = x.device();
    let m = Tensor::new(mean.as_slice(), dev)?.reshape((1, 3, 1, 1))?;
    let s = Tensor::new(std.as_slice(), dev)?.reshape((1, 3, 1, 1))?;
    Ok(x.to_dtype(DType::F32)?
        .broadcast_sub(&m)?
        .broadcast_div(&s)?)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(3)?.mean(2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn depthwise_matches_grouped_conv() {
        let mut pb = ParamBuilder::new(5);
        let dw = DepthwiseConv3x3::new(&mut pb, "dw", 4, 1).unwrap();
        let dw2 = DepthwiseConv3x3 {
            weight: dw.weight.clone(),
            stride: 2,
        };
        let x = Tensor::randn(0f32, 1.0, (2, 4, 8, 8), &Device::Cpu).unwrap();
        for (layer, stride) in [(&dw, 1usize), (&dw2, 2)] {
            let ours = layer.forward(&x).unwrap();
            let reference = x.conv2d(&dw.weight, 1, stride, 1, 4).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            let diff = (ours - reference)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert!(diff < 1e-5, "stride {stride}: {diff}");
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut pb = ParamBuilder::new(0);
        let bn = BatchNorm2d::new(&mut pb, "bn", 2).unwrap();
        let x = Tensor::ones((1, 2, 2, 2), DType::F32, &Device::Cpu).unwrap();
        // running mean 0, var 1 at init: eval is (x - 0) / sqrt(1 + eps)
        let y = bn.forward(&x, false).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&a| (a - 1.0).abs() < 1e-4));
    }
}
