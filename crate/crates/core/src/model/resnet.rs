//! ResNet18, CIFAR variant: 3×3 stem, no max-pool, four stages of two basic blocks.

use candle_core::Tensor;

use super::layers::{global_avg_pool, tap, BatchNorm2d, Conv2d, Linear, Tap};
use super::params::ParamBuilder;
use crate::error::Result;

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        pb.scoped(name, |pb| {
            let shortcut = if stride != 1 || c_in != c_out {
                Some((
                    Conv2d::new(pb, "shortcut_conv", c_in, c_out, 1, stride, 0, false)?,
                    BatchNorm2d::new(pb, "shortcut_bn", c_out)?,
                ))
            } else {
                None
            };
            Ok(BasicBlock {
                conv1: Conv2d::new(pb, "conv1", c_in, c_out, 3, stride, 1, false)?,
                bn1: BatchNorm2d::new(pb, "bn1", c_out)?,
                conv2: Conv2d::new(pb, "conv2", c_out, c_out, 3, 1, 1, false)?,
                bn2: BatchNorm2d::new(pb, "bn2", c_out)?,
                shortcut,
            })
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, train)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

#[derive(Clone, Debug)]
pub struct ResNet18 {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<[BasicBlock; 2]>,
    fc: Linear,
}

impl ResNet18 {
    pub fn new(pb: &mut ParamBuilder, num_outputs: usize, width_divisor: usize) -> Result<Self> {
        let widths: Vec<usize> = [64, 128, 256, 512]
            .iter()
            .map(|w| (w / width_divisor).max(1))
            .collect();
        let stem = Conv2d::new(pb, "stem", 3, widths[0], 3, 1, 1, false)?;
        let stem_bn = BatchNorm2d::new(pb, "stem_bn", widths[0])?;
        let mut stages = Vec::new();
        let mut c_in = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let name = format!("layer{}", i + 1);
            let blocks = pb.scoped(&name, |pb| {
                Ok([
                    BasicBlock::new(pb, "0", c_in, w, stride)?,
                    BasicBlock::new(pb, "1", w, w, 1)?,
                ])
            })?;
            stages.push(blocks);
            c_in = w;
        }
        let fc = Linear::new(pb, "fc", c_in, num_outputs)?;
        Ok(ResNet18 {
            stem,
            stem_bn,
            stages,
            fc,
        })
    }

    pub fn layer_ids() -> Vec<String> {
        ["stem", "layer1", "layer2", "layer3", "layer4", "pool", "fc"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    pub fn forward(&self, x: &Tensor, train: bool, tap: &mut Tap) -> Result<Tensor> {
        let mut h = self
            .stem_bn
            .forward(&self.stem.forward(x)?, train)?
            .relu()?;
        tap!(tap, "stem", h);
        for (i, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                h = b.forward(&h, train)?;
            }
            tap!(tap, format!("layer{}", i + 1), h);
        }
        let h = global_avg_pool(&h)?;
        tap!(tap, "pool", h);
        let out = self.fc.forward(&h)?;
        tap!(tap, "fc", out);
        Ok(out)
    }
}
