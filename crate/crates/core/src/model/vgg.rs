//! VGG11 / VGG16 with batch normalization, CIFAR variant (single linear head).

use candle_core::Tensor;

use super::layers::{tap, BatchNorm2d, Conv2d, Linear, Tap};
use super::params::ParamBuilder;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
enum Item {
    Conv(usize),
    Pool,
}

const VGG11: &[Item] = &[
    Item::Conv(64),
    Item::Pool,
    Item::Conv(128),
    Item::Pool,
    Item::Conv(256),
    Item::Conv(256),
    Item::Pool,
    Item::Conv(512),
    Item::Conv(512),
    Item::Pool,
    Item::Conv(512),
    Item::Conv(512),
    Item::Pool,
];

const VGG16: &[Item] = &[
    Item::Conv(64),
    Item::Conv(64),
    Item::Pool,
    Item::Conv(128),
    Item::Conv(128),
    Item::Pool,
    Item::Conv(256),
    Item::Conv(256),
    Item::Conv(256),
    Item::Pool,
    Item::Conv(512),
    Item::Conv(512),
    Item::Conv(512),
    Item::Pool,
    Item::Conv(512),
    Item::Conv(512),
    Item::Conv(512),
    Item::Pool,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VggDepth {
    Vgg11,
    Vgg16,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv {
        conv: Conv2d,
        bn: BatchNorm2d,
        name: String,
    },
    Pool {
        name: String,
    },
}

#[derive(Clone, Debug)]
pub struct Vgg {
    layers: Vec<Layer>,
    fc: Linear,
}

impl Vgg {
    pub fn new(
        pb: &mut ParamBuilder,
        depth: VggDepth,
        num_outputs: usize,
        width_divisor: usize,
    ) -> Result<Self> {
        let cfg = match depth {
            VggDepth::Vgg11 => VGG11,
            VggDepth::Vgg16 => VGG16,
        };
        let mut layers = Vec::new();
        let mut c_in = 3;
        let (mut n_conv, mut n_pool) = (0, 0);
        for item in cfg {
            match *item {
                Item::Conv(c) => {
                    let c = (c / width_divisor).max(1);
                    n_conv += 1;
                    let name = format!("conv{n_conv}");
                    let conv = Conv2d::new(pb, &name, c_in, c, 3, 1, 1, true)?;
                    let bn = BatchNorm2d::new(pb, &format!("bn{n_conv}"), c)?;
                    layers.push(Layer::Conv { conv, bn, name });
                    c_in = c;
                }
                Item::Pool => {
                    n_pool += 1;
                    layers.push(Layer::Pool {
                        name: format!("pool{n_pool}"),
                    });
                }
            }
        }
        let fc = Linear::new(pb, "fc", c_in, num_outputs)?;
        Ok(Vgg { layers, fc })
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv { name, .. } | Layer::Pool { name } => name.clone(),
            })
            .chain(std::iter::once("fc".to_string()))
            .collect()
    }

    /// Name of the second-to-last convolution layer.
    pub fn penultimate_conv(&self) -> String {
        let convs: Vec<&String> = self
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { name, .. } => Some(name),
                Layer::Pool { .. } => None,
            })
            .collect();
        convs[convs.len() - 2].clone()
    }

    pub fn forward(&self, x: &Tensor, train: bool, tap: &mut Tap) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            match layer {
                Layer::Conv { conv, bn, name } => {
                    h = bn.forward(&conv.forward(&h)?, train)?.relu()?;
                    tap!(tap, name, h);
                }
                Layer::Pool { name } => {
                    h = h.max_pool2d(2)?;
                    tap!(tap, name, h);
                }
            }
        }
        let h = h.flatten_from(1)?;
        let out = self.fc.forward(&h)?;
        tap!(tap, "fc", out);
        Ok(out)
    }
}
