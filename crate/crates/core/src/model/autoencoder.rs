//! Convolutional autoencoder used as the purifier.
//!
//! Encoder 3→32→64→128→128 (two stride-2 stages, 128×8×8 latent), mirrored
//! decoder with nearest upsampling. The decoder predicts a correction that is
//! added to the input and clamped to `[0,1]`.

use candle_core::Tensor;

use super::layers::{tap, Conv2d, Tap};
use super::params::ParamBuilder;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Autoencoder {
    enc: [Conv2d; 4],
    dec: [Conv2d; 4],
}

impl Autoencoder {
    pub fn new(pb: &mut ParamBuilder, width_divisor: usize) -> Result<Self> {
        let c = |x: usize| (x / width_divisor).max(1);
        let (c1, c2, c3) = (c(32), c(64), c(128));
        let enc = pb.scoped("encoder", |pb| {
            Ok([
                Conv2d::new(pb, "conv1", 3, c1, 3, 1, 1, true)?,
                Conv2d::new(pb, "conv2", c1, c2, 3, 2, 1, true)?,
                Conv2d::new(pb, "conv3", c2, c3, 3, 2, 1, true)?,
                Conv2d::new(pb, "conv4", c3, c3, 3, 1, 1, true)?,
            ])
        })?;
        let dec = pb.scoped("decoder", |pb| {
            Ok([
                Conv2d::new(pb, "conv1", c3, c3, 3, 1, 1, true)?,
                Conv2d::new(pb, "conv2", c3, c2, 3, 1, 1, true)?,
                Conv2d::new(pb, "conv3", c2, c1, 3, 1, 1, true)?,
                Conv2d::new(pb, "conv4", c1, 3, 3, 1, 1, true)?,
            ])
        })?;
        Ok(Autoencoder { enc, dec })
    }

    pub fn layer_ids() -> Vec<String> {
        ["encoder", "decoder"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.enc {
            h = conv.forward(&h)?.relu()?;
        }
        Ok(h)
    }

    pub fn decode(&self, h: &Tensor, x: &Tensor) -> Result<Tensor> {
        let (_, _, hh, ww) = h.dims4()?;
        let d = self.dec[0].forward(h)?.relu()?;
        let d = d.upsample_nearest2d(hh * 2, ww * 2)?;
        let d = self.dec[1].forward(&d)?.relu()?;
        let d = d.upsample_nearest2d(hh * 4, ww * 4)?;
        let d = self.dec[2].forward(&d)?.relu()?;
        let d = self.dec[3].forward(&d)?;
        Ok((x + d)?.clamp(0f32, 1f32)?)
    }

    pub fn forward(&self, x: &Tensor, _train: bool, tap: &mut Tap) -> Result<Tensor> {
        let h = self.encode(x)?;
        tap!(tap, "encoder", h);
        let out = self.decode(&h, x)?;
        tap!(tap, "decoder", out);
        Ok(out)
    }
}
