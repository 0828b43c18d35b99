//! The six networks and the single-image swapping chain.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};

use super::config::{ModelConfig, TrainConfig};
use crate::blending::{aggregate_level, aggregate_pyramid, FaceMask};
use crate::error::{Error, Result, StageExt};
use crate::latent::{
    apply_transfer_direction, compose_swap_code, split_code, AppearanceCode, LatentCode, StructureCode,
    TransferDirection,
};
use crate::nets::{
    rasterize_heatmaps, Decoder, Discriminator, FaceInverter, GeneratorConfig, HeatmapStack, Image, LandmarkEncoder,
    LandmarkSet, ParamStore, TargetEncoder, Generator,
};

/// Every trainable network of the swapping pipeline.
#[derive(Debug)]
pub struct Models {
    config: ModelConfig,
    generator_config: GeneratorConfig,
    seed: u64,
    pub generator: Generator,
    pub inverter: FaceInverter,
    pub landmark_encoder: LandmarkEncoder,
    pub target_encoder: TargetEncoder,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
}

/// A batch of swap inputs; images are `(B, 3, R, R)`.
#[derive(Clone, Debug)]
pub struct SwapBatch {
    pub x_s: Tensor,
    pub x_t: Tensor,
    pub masks: Vec<FaceMask>,
    pub l_s: Vec<LandmarkSet>,
    pub l_t: Vec<LandmarkSet>,
    /// Per-sample flag that source and target are the same image.
    pub same: Vec<bool>,
}

impl SwapBatch {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Codes computed before synthesis.
#[derive(Clone, Debug)]
pub struct PreparedSwap {
    pub w_s: LatentCode,
    pub w_t: LatentCode,
    pub g_s: StructureCode,
    pub g_t: StructureCode,
    /// Appearance rows fed to the generator: the target's, or the source's
    /// when appearance swapping is disabled.
    pub appearance: AppearanceCode,
    pub direction: TransferDirection,
}

#[derive(Clone, Debug)]
pub struct Rendered {
    pub swap_code: LatentCode,
    pub y_s: Tensor,
    pub y_f: Tensor,
}

#[derive(Clone, Debug)]
pub struct SwapForward {
    pub prepared: PreparedSwap,
    pub g_hat: StructureCode,
    pub rendered: Rendered,
}

/// Outputs of [`swap_image`] for a single pair.
#[derive(Clone, Debug)]
pub struct SwapResult {
    pub side_output: Image,
    pub final_image: Image,
    pub swap_code: LatentCode,
    pub direction: TransferDirection,
}

impl Models {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let g = config.generator(seed);
        let k = config.structure_k;
        Ok(Self {
            generator: Generator::new(&g, seed, dtype, device)?,
            inverter: FaceInverter::new(&g, k, seed, dtype, device)?,
            landmark_encoder: LandmarkEncoder::new(
                &g,
                k,
                config.num_landmarks,
                config.heatmap_grid,
                seed,
                dtype,
                device,
            )?,
            target_encoder: TargetEncoder::new(&g, seed, dtype, device)?,
            decoder: Decoder::new(&g, seed, dtype, device)?,
            discriminator: Discriminator::new(&g, seed, dtype, device)?,
            config: config.clone(),
            generator_config: g,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn generator_config(&self) -> &GeneratorConfig {
        &self.generator_config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn dtype(&self) -> DType {
        self.generator.store().dtype()
    }

    pub fn device(&self) -> &Device {
        self.generator.store().device()
    }

    pub fn split_index(&self) -> usize {
        self.inverter.layout().structure_end
    }

    pub fn stores(&self) -> Vec<&ParamStore> {
        let [inv, latent] = self.inverter.stores();
        vec![
            self.generator.store(),
            inv,
            latent,
            self.landmark_encoder.store(),
            self.target_encoder.store(),
            self.decoder.store(),
            self.discriminator.store(),
        ]
    }

    /// Every parameter, keyed `<network>/<name>`.
    pub fn all_vars(&self) -> BTreeMap<String, Var> {
        self.stores()
            .into_iter()
            .flat_map(|s| s.vars().iter().map(|(k, v)| (k.clone(), v.clone())))
            .collect()
    }

    /// Parameters updated by the generator-side optimizer.
    pub fn generator_side_vars(&self, train: &TrainConfig) -> BTreeMap<String, Var> {
        let [inv, latent] = self.inverter.stores();
        let mut stores = vec![self.landmark_encoder.store(), self.target_encoder.store(), self.decoder.store()];
        if train.train_inverter {
            stores.push(inv);
            stores.push(latent);
        }
        if train.train_generator {
            stores.push(self.generator.store());
        }
        stores
            .into_iter()
            .flat_map(|s| s.vars().iter().map(|(k, v)| (k.clone(), v.clone())))
            .collect()
    }

    pub fn discriminator_vars(&self) -> BTreeMap<String, Var> {
        self.discriminator.store().vars().clone()
    }

    /// Freezes the networks that swap training leaves fixed.
    pub fn apply_training_freeze(&self, train: &TrainConfig) {
        self.generator.store().set_frozen(!train.train_generator);
        self.inverter.set_frozen(!train.train_inverter);
    }

    pub fn freeze_all(&self, frozen: bool) {
        for s in self.stores() {
            s.set_frozen(frozen);
        }
    }

    fn heatmaps(&self, landmarks: &[LandmarkSet]) -> Result<Tensor> {
        let stacks = landmarks
            .iter()
            .map(|l| {
                if l.len() != self.config.num_landmarks {
                    return Err(Error::InvalidArgument(format!(
                        "expected {} landmarks, got {}",
                        self.config.num_landmarks,
                        l.len()
                    )));
                }
                rasterize_heatmaps(l, self.config.heatmap_grid, self.config.heatmap_sigma)
            })
            .collect::<Result<Vec<_>>>()?;
        HeatmapStack::batch(&stacks, self.dtype(), self.device())
    }

    /// Inversion of both faces, code split and structure direction.
    pub fn prepare(&self, x_s: &Tensor, x_t: &Tensor, l_s: &[LandmarkSet], l_t: &[LandmarkSet]) -> Result<PreparedSwap> {
        let w_s = self.inverter.invert(x_s).stage("invert_face")?;
        let w_t = self.inverter.invert(x_t).stage("invert_face")?;
        let (g_s, h_s) = split_code(&w_s)?;
        let (g_t, h_t) = split_code(&w_t)?;
        let heat_s = self.heatmaps(l_s).stage("rasterize_heatmaps")?;
        let heat_t = self.heatmaps(l_t).stage("rasterize_heatmaps")?;
        let direction = self
            .landmark_encoder
            .encode(&heat_s, &heat_t)
            .stage("encode_structure_direction")?;
        let appearance = if self.config.disable_appearance_swap { h_s } else { h_t };
        Ok(PreparedSwap {
            w_s,
            w_t,
            g_s,
            g_t,
            appearance,
            direction,
        })
    }

    /// Synthesis from a structure code, feature blending and final decoding.
    pub fn render(
        &self,
        g_hat: &StructureCode,
        appearance: &AppearanceCode,
        x_t: &Tensor,
        masks: &[FaceMask],
    ) -> Result<Rendered> {
        let swap_code = compose_swap_code(g_hat, appearance)?;
        let (y_s, f_s) = self.generator.synthesize(&swap_code).stage("synthesize")?;
        let y_f = if self.config.disable_background_transfer {
            let m = FaceMask::batch(masks, y_s.dtype(), y_s.device())?;
            aggregate_level(&y_s, x_t, &m).stage("composite_pixels")?
        } else {
            let f_t = self.target_encoder.encode(x_t).stage("encode_target")?;
            let blended = aggregate_pyramid(&f_s, &f_t, masks, self.config.hard_mask).stage("aggregate_pyramid")?;
            self.decoder.decode(&blended).stage("decode_final")?
        };
        Ok(Rendered { swap_code, y_s, y_f })
    }

    pub fn swap_forward(&self, batch: &SwapBatch) -> Result<SwapForward> {
        let prepared = self.prepare(&batch.x_s, &batch.x_t, &batch.l_s, &batch.l_t)?;
        let g_hat = apply_transfer_direction(&prepared.g_s, &prepared.direction)?;
        let rendered = self.render(&g_hat, &prepared.appearance, &batch.x_t, &batch.masks)?;
        Ok(SwapForward {
            prepared,
            g_hat,
            rendered,
        })
    }
}

/// Full swapping chain for one source/target pair.
pub fn swap_image(
    models: &Models,
    x_s: &Image,
    x_t: &Image,
    m_t: &FaceMask,
    l_s: &LandmarkSet,
    l_t: &LandmarkSet,
) -> Result<SwapResult> {
    let r = models.resolution();
    for (what, img) in [("source", x_s), ("target", x_t)] {
        if img.resolution() != r {
            return Err(Error::shape(
                "swap_image",
                format!("{what} image is {}px, models expect {r}px", img.resolution()),
            ));
        }
    }
    if m_t.side() != r {
        return Err(Error::shape("swap_image", format!("mask is {}px, models expect {r}px", m_t.side())));
    }
    let (dtype, device) = (models.dtype(), models.device().clone());
    let batch = SwapBatch {
        x_s: x_s.to_dtype(dtype)?.tensor().unsqueeze(0)?.to_device(&device)?,
        x_t: x_t.to_dtype(dtype)?.tensor().unsqueeze(0)?.to_device(&device)?,
        masks: vec![m_t.clone()],
        l_s: vec![l_s.clone()],
        l_t: vec![l_t.clone()],
        same: vec![false],
    };
    let out = models.swap_forward(&batch)?;
    Ok(SwapResult {
        side_output: Image::new(out.rendered.y_s.detach().get(0)?)?,
        final_image: Image::new(out.rendered.y_f.detach().get(0)?)?,
        swap_code: LatentCode::new(out.rendered.swap_code.tensor().detach().get(0)?, models.split_index())?,
        direction: TransferDirection::new(out.prepared.direction.tensor().detach().get(0)?)?,
    })
}
