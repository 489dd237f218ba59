//! Small Vision Transformer: patch 4 on 32×32 (64 tokens + class token),
//! 6 pre-norm encoder blocks, embedding 256, 8 heads.

use candle_core::{Tensor, D};

use super::layers::{tap, Conv2d, LayerNorm, Linear, Tap};
use super::params::ParamBuilder;
use crate::error::Result;

pub const PATCH: usize = 4;
pub const DEPTH: usize = 6;
pub const EMBED_DIM: usize = 256;
pub const HEADS: usize = 8;
pub const MLP_RATIO: usize = 2;

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Block {
                ln1: LayerNorm::new(pb, "ln1", dim)?,
                qkv: Linear::new(pb, "qkv", dim, 3 * dim)?,
                proj: Linear::new(pb, "proj", dim, dim)?,
                ln2: LayerNorm::new(pb, "ln2", dim)?,
                fc1: Linear::new(pb, "fc1", dim, MLP_RATIO * dim)?,
                fc2: Linear::new(pb, "fc2", MLP_RATIO * dim, dim)?,
                heads,
            })
        })
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (n, t, dim) = x.dims3()?;
        let hd = dim / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((n, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let att = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = att
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, t, dim))?;
        self.proj.forward(&out)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attention(&self.ln1.forward(x)?)?)?;
        let h = self
            .fc2
            .forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?)?;
        Ok((x + h)?)
    }
}

#[derive(Clone, Debug)]
pub struct VisionTransformer {
    patch_embed: Conv2d,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl VisionTransformer {
    pub fn new(pb: &mut ParamBuilder, num_outputs: usize, width_divisor: usize) -> Result<Self> {
        let dim = (EMBED_DIM / width_divisor).max(HEADS);
        let dim = dim - dim % HEADS;
        let tokens = (32 / PATCH) * (32 / PATCH) + 1;
        let patch_embed = Conv2d::new(pb, "patch_embed", 3, dim, PATCH, PATCH, 0, true)?;
        let cls_token = pb.normal("cls_token", &[1, 1, dim], 0.02)?;
        let pos_embed = pb.normal("pos_embed", &[1, tokens, dim], 0.02)?;
        let blocks = (0..DEPTH)
            .map(|i| Block::new(pb, &format!("block{}", i + 1), dim, HEADS))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(pb, "norm", dim)?;
        let head = Linear::new(pb, "head", dim, num_outputs)?;
        Ok(VisionTransformer {
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
        })
    }

    pub fn layer_ids() -> Vec<String> {
        let mut ids = vec!["patch_embed".to_string()];
        ids.extend((1..=DEPTH).map(|i| format!("block{i}")));
        ids.extend(["norm", "head"].iter().map(|s| s.to_string()));
        ids
    }

    pub fn forward(&self, x: &Tensor, _train: bool, tap: &mut Tap) -> Result<Tensor> {
        let p = self.patch_embed.forward(x)?;
        let (n, dim, _, _) = p.dims4()?;
        let tokens = p.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        tap!(tap, "patch_embed", tokens);
        let cls = self.cls_token.broadcast_as((n, 1, dim))?.contiguous()?;
        let mut h = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.pos_embed)?;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h)?;
            tap!(tap, format!("block{}", i + 1), h);
        }
        let h = self.norm.forward(&h)?;
        let cls = h.narrow(1, 0, 1)?.squeeze(1)?;
        tap!(tap, "norm", cls);
        let out = self.head.forward(&cls)?;
        tap!(tap, "head", out);
        Ok(out)
    }
}
