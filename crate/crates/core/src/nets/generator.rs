use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::{lrelu, ModConv};
use super::params::{Param, ParamStore};
use super::{FeaturePyramid, GeneratorConfig};
use crate::error::{Error, Result};
use crate::latent::LatentCode;

#[derive(Debug)]
struct NoiseInput {
    strength: Param,
    map: Tensor,
}

impl NoiseInput {
    fn new(ps: &mut ParamStore, name: &str, side: usize, seed: u64) -> Result<Self> {
        let strength = ps.constant(&format!("{name}.noise_strength"), &[1], 0.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..side * side).map(|_| StandardNormal.sample(&mut rng)).collect();
        let map = Tensor::from_vec(values, (1, 1, side, side), ps.device())?.to_dtype(ps.dtype())?;
        Ok(Self { strength, map })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.map.broadcast_mul(&self.strength.t().reshape((1, 1, 1, 1))?)?;
        Ok(x.broadcast_add(&n)?)
    }
}

#[derive(Debug)]
struct Level {
    conv0: ModConv,
    conv1: ModConv,
    to_rgb: ModConv,
    noise: Option<[NoiseInput; 2]>,
}

/// Style-modulated generator: learned 4x4 constant, two latent-modulated
/// convolutions per resolution level, skip-connected RGB outputs.
///
/// Latent row `2i` drives the first convolution of level `i` (4x4 is level 0)
/// and row `2i + 1` drives the second convolution and that level's RGB head.
#[derive(Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    store: ParamStore,
    constant: Param,
    levels: Vec<Level>,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new("gen", seed, dtype, device);
        let d = cfg.latent_width;
        let c4 = cfg.channels(4);
        let constant = ps.normal("const", &[1, c4, 4, 4], 1.0)?;
        let mut levels = Vec::new();
        let mut c_prev = c4;
        let mut side = 4;
        while side <= cfg.resolution {
            let c = cfg.channels(side);
            let name = format!("b{side}");
            let first = side == 4;
            let conv0 = ModConv::new(&mut ps, &format!("{name}.conv0"), d, c_prev, c, 3, true, !first)?;
            let conv1 = ModConv::new(&mut ps, &format!("{name}.conv1"), d, c, c, 3, true, false)?;
            let to_rgb = ModConv::new(&mut ps, &format!("{name}.torgb"), d, c, 3, 1, false, false)?;
            let noise = if cfg.noise {
                let s = cfg.noise_seed.wrapping_mul(1000).wrapping_add(side as u64 * 2);
                Some([
                    NoiseInput::new(&mut ps, &format!("{name}.conv0"), side, s)?,
                    NoiseInput::new(&mut ps, &format!("{name}.conv1"), side, s + 1)?,
                ])
            } else {
                None
            };
            levels.push(Level {
                conv0,
                conv1,
                to_rgb,
                noise,
            });
            c_prev = c;
            side *= 2;
        }
        Ok(Self {
            cfg: cfg.clone(),
            store: ps,
            constant,
            levels,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Maps a (batched or single) latent code to the side-output image
    /// `(B, 3, R, R)` in `[-1, 1]` and the per-level feature pyramid from 8x8
    /// upward. A single code is treated as a batch of one.
    pub fn synthesize(&self, w: &LatentCode) -> Result<(Tensor, FeaturePyramid)> {
        let l = self.cfg.num_latent_vectors();
        if w.num_vectors() != l || w.width() != self.cfg.latent_width {
            return Err(Error::shape(
                "synthesize",
                format!(
                    "expected {l} x {} code, got {} x {}",
                    self.cfg.latent_width,
                    w.num_vectors(),
                    w.width()
                ),
            ));
        }
        let ws = if w.is_batched() {
            w.tensor().clone()
        } else {
            w.tensor().unsqueeze(0)?
        };
        let b = ws.dim(0)?;
        let row = |i: usize| -> Result<Tensor> { Ok(ws.narrow(1, i, 1)?.squeeze(1)?) };

        let c4 = self.constant.t();
        let mut x = c4.broadcast_as((b, c4.dim(1)?, 4, 4))?.contiguous()?;
        let mut rgb: Option<Tensor> = None;
        let mut taps = Vec::new();
        for (i, level) in self.levels.iter().enumerate() {
            let (w0, w1) = (row(2 * i)?, row(2 * i + 1)?);
            x = level.conv0.forward(&x, &w0)?;
            if let Some(n) = &level.noise {
                x = n[0].apply(&x)?;
            }
            x = lrelu(&x)?;
            x = level.conv1.forward(&x, &w1)?;
            if let Some(n) = &level.noise {
                x = n[1].apply(&x)?;
            }
            x = lrelu(&x)?;
            let y = level.to_rgb.forward(&x, &w1)?;
            rgb = Some(match rgb {
                None => y,
                Some(prev) => {
                    let (_, _, h, wd) = prev.dims4()?;
                    (prev.upsample_nearest2d(2 * h, 2 * wd)? + y)?
                }
            });
            if x.dim(2)? >= 8 {
                taps.push(x.clone());
            }
        }
        let image = rgb.expect("at least one level").tanh()?;
        Ok((image, FeaturePyramid::new(taps)?))
    }
}
