//! MobileNetV2, CIFAR variant (stride-1 stem, first two downsamples removed).

use candle_core::Tensor;

use super::layers::{global_avg_pool, tap, BatchNorm2d, Conv2d, DepthwiseConv3x3, Linear, Tap};
use super::params::ParamBuilder;
use crate::error::Result;

/// (expansion, out_channels, blocks, stride)
const CFG: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 1),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

#[derive(Clone, Debug)]
struct InvertedResidual {
    expand: Conv2d,
    bn1: BatchNorm2d,
    depthwise: DepthwiseConv3x3,
    bn2: BatchNorm2d,
    project: Conv2d,
    bn3: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
    stride: usize,
}

impl InvertedResidual {
    fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        expansion: usize,
        stride: usize,
    ) -> Result<Self> {
        pb.scoped(name, |pb| {
            let hidden = c_in * expansion;
            let shortcut = if stride == 1 && c_in != c_out {
                Some((
                    Conv2d::new(pb, "shortcut_conv", c_in, c_out, 1, 1, 0, false)?,
                    BatchNorm2d::new(pb, "shortcut_bn", c_out)?,
                ))
            } else {
                None
            };
            Ok(InvertedResidual {
                expand: Conv2d::new(pb, "expand", c_in, hidden, 1, 1, 0, false)?,
                bn1: BatchNorm2d::new(pb, "bn1", hidden)?,
                depthwise: DepthwiseConv3x3::new(pb, "depthwise", hidden, stride)?,
                bn2: BatchNorm2d::new(pb, "bn2", hidden)?,
                project: Conv2d::new(pb, "project", hidden, c_out, 1, 1, 0, false)?,
                bn3: BatchNorm2d::new(pb, "bn3", c_out)?,
                shortcut,
                stride,
            })
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn1.forward(&self.expand.forward(x)?, train)?.relu()?;
        let h = self
            .bn2
            .forward(&self.depthwise.forward(&h)?, train)?
            .relu()?;
        let h = self.bn3.forward(&self.project.forward(&h)?, train)?;
        if self.stride != 1 {
            return Ok(h);
        }
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

#[derive(Clone, Debug)]
pub struct MobileNetV2 {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<InvertedResidual>>,
    head: Conv2d,
    head_bn: BatchNorm2d,
    fc: Linear,
}

impl MobileNetV2 {
    pub fn new(pb: &mut ParamBuilder, num_outputs: usize, width_divisor: usize) -> Result<Self> {
        let scale = |c: usize| (c / width_divisor).max(1);
        let stem_c = scale(32);
        let stem = Conv2d::new(pb, "stem", 3, stem_c, 3, 1, 1, false)?;
        let stem_bn = BatchNorm2d::new(pb, "stem_bn", stem_c)?;
        let mut c_in = stem_c;
        let mut stages = Vec::new();
        for (i, &(expansion, out, blocks, stride)) in CFG.iter().enumerate() {
            let out = scale(out);
            let stage = pb.scoped(&format!("stage{}", i + 1), |pb| {
                let mut v = Vec::new();
                for b in 0..blocks {
                    let s = if b == 0 { stride } else { 1 };
                    v.push(InvertedResidual::new(
                        pb,
                        &b.to_string(),
                        c_in,
                        out,
                        expansion,
                        s,
                    )?);
                    c_in = out;
                }
                Ok(v)
            })?;
            stages.push(stage);
        }
        let head_c = scale(1280);
        let head = Conv2d::new(pb, "head", c_in, head_c, 1, 1, 0, false)?;
        let head_bn = BatchNorm2d::new(pb, "head_bn", head_c)?;
        let fc = Linear::new(pb, "fc", head_c, num_outputs)?;
        Ok(MobileNetV2 {
            stem,
            stem_bn,
            stages,
            head,
            head_bn,
            fc,
        })
    }

    pub fn layer_ids() -> Vec<String> {
        let mut ids = vec!["stem".to_string()];
        ids.extend((1..=CFG.len()).map(|i| format!("stage{i}")));
        ids.extend(["head", "pool", "fc"].iter().map(|s| s.to_string()));
        ids
    }

    pub fn forward(&self, x: &Tensor, train: bool, tap: &mut Tap) -> Result<Tensor> {
        let mut h = self
            .stem_bn
            .forward(&self.stem.forward(x)?, train)?
            .relu()?;
        tap!(tap, "stem", h);
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                h = block.forward(&h, train)?;
            }
            tap!(tap, format!("stage{}", i + 1), h);
        }
        let h = self
            .head_bn
            .forward(&self.head.forward(&h)?, train)?
            .relu()?;
        tap!(tap, "head", h);
        let h = global_avg_pool(&h)?;
        tap!(tap, "pool", h);
        let out = self.fc.forward(&h)?;
        tap!(tap, "fc", out);
        Ok(out)
    }
}
