use candle_core::{DType, Device, Tensor};

use super::layers::{lrelu, Conv2d, ConvTranspose2d};
use super::params::ParamStore;
use super::{FeaturePyramid, GeneratorConfig};
use crate::error::{Error, Result};

#[derive(Debug)]
struct Block {
    conv: Conv2d,
    up: Option<ConvTranspose2d>,
}

/// Mirror of the target encoder. Block 0 reads the 8x8 blended features;
/// block `i > 0` reads the transpose-conv upsampled output of block `i - 1`
/// concatenated with the blended features at its resolution.
#[derive(Debug)]
pub struct Decoder {
    store: ParamStore,
    blocks: Vec<Block>,
    to_rgb: Conv2d,
    levels: usize,
}

impl Decoder {
    pub fn new(cfg: &GeneratorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new("dec", seed, dtype, device);
        let sides = cfg.pyramid_resolutions();
        let mut blocks = Vec::with_capacity(sides.len());
        for (i, &side) in sides.iter().enumerate() {
            let c = cfg.channels(side);
            let c_in = if i == 0 { c } else { 2 * c };
            let conv = Conv2d::new(&mut ps, &format!("block{side}.conv"), c_in, c, 3, 1, 1.0)?;
            let up = match sides.get(i + 1) {
                Some(&next) => Some(ConvTranspose2d::new(
                    &mut ps,
                    &format!("block{side}.up"),
                    c,
                    cfg.channels(next),
                )?),
                None => None,
            };
            blocks.push(Block { conv, up });
        }
        let to_rgb = Conv2d::new(&mut ps, "torgb", cfg.channels(cfg.resolution), 3, 1, 1, 0.5)?;
        Ok(Self {
            store: ps,
            blocks,
            to_rgb,
            levels: sides.len(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Aggregated pyramid to the final image `(B, 3, R, R)` in `[-1, 1]`.
    pub fn decode(&self, pyramid: &FeaturePyramid) -> Result<Tensor> {
        if pyramid.len() != self.levels {
            return Err(Error::shape(
                "decode_final",
                format!("expected {} pyramid levels, got {}", self.levels, pyramid.len()),
            ));
        }
        let mut carried: Option<Tensor> = None;
        for (block, feat) in self.blocks.iter().zip(pyramid.levels()) {
            let input = match &carried {
                None => feat.clone(),
                Some(up) => Tensor::cat(&[up, feat], 1)?,
            };
            let h = lrelu(&block.conv.forward(&input)?)?;
            carried = Some(match &block.up {
                Some(up) => lrelu(&up.forward(&h)?)?,
                None => h,
            });
        }
        let h = carried.expect("decoder has at least one block");
        Ok(self.to_rgb.forward(&h)?.tanh()?)
    }
}
