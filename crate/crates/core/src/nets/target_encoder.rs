use candle_core::{DType, Device, Tensor};

use super::layers::{lrelu, Conv2d};
use super::params::ParamStore;
use super::{check_batch, FeaturePyramid, GeneratorConfig};
use crate::error::Result;

/// Target-image encoder whose activations match the generator's feature
/// pyramid level by level.
///
/// Block 0 maps RGB to full-resolution features; every later block is a
/// stride-2 convolution. Activations come out finest first and are returned
/// coarsest first.
#[derive(Debug)]
pub struct TargetEncoder {
    store: ParamStore,
    blocks: Vec<Conv2d>,
    resolution: usize,
}

impl TargetEncoder {
    pub fn new(cfg: &GeneratorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new("tenc", seed, dtype, device);
        let mut sides = cfg.pyramid_resolutions();
        sides.reverse();
        let mut blocks = Vec::with_capacity(sides.len());
        blocks.push(Conv2d::new(&mut ps, &format!("block{}", sides[0]), 3, cfg.channels(sides[0]), 3, 1, 1.0)?);
        for pair in sides.windows(2) {
            blocks.push(Conv2d::new(
                &mut ps,
                &format!("block{}", pair[1]),
                cfg.channels(pair[0]),
                cfg.channels(pair[1]),
                3,
                2,
                1.0,
            )?);
        }
        Ok(Self {
            store: ps,
            blocks,
            resolution: cfg.resolution,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encode(&self, images: &Tensor) -> Result<FeaturePyramid> {
        check_batch(images, 3, self.resolution, "encode_target")?;
        let mut h = images.clone();
        let mut taps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = lrelu(&block.forward(&h)?)?;
            taps.push(h.clone());
        }
        taps.reverse();
        FeaturePyramid::new(taps)
    }
}
