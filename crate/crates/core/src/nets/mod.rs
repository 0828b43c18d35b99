//! Trainable networks: the style-modulated generator with feature taps, the
//! face inverter, the landmark encoder, the target encoder, the decoder that
//! mirrors it, and the discriminator.

mod config;
mod decoder;
mod discriminator;
mod encoders;
mod generator;
mod heatmap;
pub mod layers;
mod params;
mod target_encoder;

use candle_core::{DType, Device, Tensor};

pub use config::{channel_width, num_latent_vectors, GeneratorConfig};
pub use decoder::Decoder;
pub use discriminator::Discriminator;
pub use encoders::{FaceInverter, HeadLayout, LandmarkEncoder};
pub use generator::Generator;
pub use heatmap::{rasterize_heatmaps, HeatmapStack, LandmarkSet};
pub use params::{Param, ParamStore};
pub use target_encoder::TargetEncoder;

use crate::error::{Error, Result};

/// An RGB image, `(3, H, W)` with `H == W`, values nominally in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Image(Tensor);

impl Image {
    pub fn new(t: Tensor) -> Result<Self> {
        let img = Self::from_graph(t)?;
        let values = img.to_vec()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image contains non-finite values".into()));
        }
        Ok(img)
    }

    pub(crate) fn from_graph(t: Tensor) -> Result<Self> {
        let dims = t.dims();
        if dims.len() != 3 || dims[0] != 3 || dims[1] != dims[2] {
            return Err(Error::shape("image", format!("expected (3, R, R), got {dims:?}")));
        }
        Ok(Self(t))
    }

    /// Channel-major values, `data[c * R * R + y * R + x]`.
    pub fn from_chw(data: Vec<f64>, resolution: usize, dtype: DType, device: &Device) -> Result<Self> {
        if data.len() != 3 * resolution * resolution {
            return Err(Error::shape("image", format!("{} values for resolution {resolution}", data.len())));
        }
        Self::new(Tensor::from_vec(data, (3, resolution, resolution), device)?.to_dtype(dtype)?)
    }

    pub fn constant(value: f64, resolution: usize, dtype: DType, device: &Device) -> Result<Self> {
        Self::new((Tensor::ones((3, resolution, resolution), dtype, device)? * value)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn resolution(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn dtype(&self) -> DType {
        self.0.dtype()
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.0.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self(self.0.to_dtype(dtype)?))
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }

    /// `(B, 3, R, R)` batch from equally sized images.
    pub fn stack(images: &[Image]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("cannot stack an empty image list".into()));
        }
        let ts: Vec<&Tensor> = images.iter().map(|i| &i.0).collect();
        Ok(Tensor::stack(&ts, 0)?)
    }

    pub fn unstack(batch: &Tensor) -> Result<Vec<Image>> {
        let b = batch.dim(0)?;
        (0..b).map(|i| Image::from_graph(batch.get(i)?)).collect()
    }
}

pub(crate) fn check_batch(x: &Tensor, channels: usize, resolution: usize, stage: &'static str) -> Result<()> {
    let dims = x.dims();
    if dims.len() != 4 || dims[1] != channels || dims[2] != resolution || dims[3] != resolution {
        return Err(Error::shape(
            stage,
            format!("expected (B, {channels}, {resolution}, {resolution}), got {dims:?}"),
        ));
    }
    Ok(())
}

/// Per-level feature maps at 8x8, 16x16, ..., R x R, each `(B, C_i, r_i, r_i)`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::shape("feature pyramid", "no levels"));
        }
        for (i, t) in levels.iter().enumerate() {
            let dims = t.dims();
            let side = 8usize << i;
            if dims.len() != 4 || dims[2] != side || dims[3] != side {
                return Err(Error::shape(
                    "feature pyramid",
                    format!("level {i} should be {side}x{side}, got {dims:?}"),
                ));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|t| t.dims().to_vec()).collect()
    }

    pub fn detach(&self) -> Self {
        Self {
            levels: self.levels.iter().map(Tensor::detach).collect(),
        }
    }
}
