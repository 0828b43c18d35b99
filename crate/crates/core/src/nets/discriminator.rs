use candle_core::{DType, Device, Tensor};

use super::layers::{lrelu, sigmoid, Conv2d, Linear};
use super::params::ParamStore;
use super::{check_batch, GeneratorConfig};
use crate::error::Result;

/// Strided-conv real/fake classifier down to 4x4, then a linear logit.
#[derive(Debug)]
pub struct Discriminator {
    store: ParamStore,
    from_rgb: Conv2d,
    downs: Vec<Conv2d>,
    out: Linear,
    resolution: usize,
}

impl Discriminator {
    pub fn new(cfg: &GeneratorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new("disc", seed, dtype, device);
        let from_rgb = Conv2d::new(&mut ps, "fromrgb", 3, cfg.channels(cfg.resolution), 1, 1, 1.0)?;
        let mut downs = Vec::new();
        let mut side = cfg.resolution;
        while side > 4 {
            downs.push(Conv2d::new(
                &mut ps,
                &format!("down{}", side / 2),
                cfg.channels(side),
                cfg.channels(side / 2),
                3,
                2,
                1.0,
            )?);
            side /= 2;
        }
        let c4 = cfg.channels(4);
        let out = Linear::new(&mut ps, "out", c4 * 16, 1, 1.0, 0.0)?;
        Ok(Self {
            store: ps,
            from_rgb,
            downs,
            out,
            resolution: cfg.resolution,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `(B, 3, R, R) -> (B,)` logits.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        check_batch(images, 3, self.resolution, "discriminate")?;
        let mut h = lrelu(&self.from_rgb.forward(images)?)?;
        for down in &self.downs {
            h = lrelu(&down.forward(&h)?)?;
        }
        let b = h.dim(0)?;
        let flat = h.reshape((b, ()))?;
        Ok(self.out.forward(&flat)?.squeeze(1)?)
    }

    /// Probabilities in `(0, 1)`, one per image.
    pub fn discriminate(&self, images: &Tensor) -> Result<Tensor> {
        sigmoid(&self.logits(images)?)
    }
}
