//! Feature-pyramid encoders with one map-to-style head per latent row.

use candle_core::{DType, Device, Tensor};

use super::layers::{lrelu, Conv2d, MapToStyle};
use super::params::{Param, ParamStore};
use super::{check_batch, GeneratorConfig};
use crate::error::{Error, Result};
use crate::latent::{structure_split_index, LatentCode, TransferDirection};

/// Assignment of latent rows to pyramid levels: coarse rows `[0, coarse_end)`,
/// medium rows `[coarse_end, structure_end)`, fine rows `[structure_end, total)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub coarse_end: usize,
    pub structure_end: usize,
    pub total: usize,
}

impl HeadLayout {
    /// Coarse rows scale as 3 of 18; medium rows fill up to the split index.
    pub fn new(total: usize, structure_end: usize) -> Result<Self> {
        if structure_end < 1 || structure_end >= total {
            return Err(Error::InvalidConfig(format!(
                "structure split {structure_end} invalid for {total} rows"
            )));
        }
        let coarse_end = ((total + 3) / 6).clamp(1, structure_end);
        Ok(Self {
            coarse_end,
            structure_end,
            total,
        })
    }

    pub fn level_of(&self, row: usize) -> PyramidLevel {
        if row < self.coarse_end {
            PyramidLevel::Coarse
        } else if row < self.structure_end {
            PyramidLevel::Medium
        } else {
            PyramidLevel::Fine
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PyramidLevel {
    Coarse,
    Medium,
    Fine,
}

/// Strided-conv backbone with a top-down path producing coarse, medium and
/// fine maps at `in/16`, `in/8` and `in/4` (never below 4x4).
#[derive(Debug)]
struct PyramidBackbone {
    in_channels: usize,
    in_res: usize,
    stem: Conv2d,
    downs: Vec<Conv2d>,
    lat_medium: Conv2d,
    lat_fine: Conv2d,
    sides: [usize; 3],
    fpn_channels: usize,
}

impl PyramidBackbone {
    fn new(ps: &mut ParamStore, in_channels: usize, in_res: usize, cfg: &GeneratorConfig) -> Result<Self> {
        let stem = Conv2d::new(ps, "stem", in_channels, cfg.channels(in_res), 3, 1, 1.0)?;
        let mut downs = Vec::new();
        let mut side = in_res;
        while side > 4 {
            let next = side / 2;
            downs.push(Conv2d::new(
                ps,
                &format!("down{next}"),
                cfg.channels(side),
                cfg.channels(next),
                3,
                2,
                1.0,
            )?);
            side = next;
        }
        let sides = [(in_res / 16).max(4), (in_res / 8).max(4), (in_res / 4).max(4)];
        let fpn_channels = cfg.channels(sides[0]);
        let lat_medium = Conv2d::new(ps, "lat_medium", cfg.channels(sides[1]), fpn_channels, 1, 1, 1.0)?;
        let lat_fine = Conv2d::new(ps, "lat_fine", cfg.channels(sides[2]), fpn_channels, 1, 1, 1.0)?;
        Ok(Self {
            in_channels,
            in_res,
            stem,
            downs,
            lat_medium,
            lat_fine,
            sides,
            fpn_channels,
        })
    }

    fn side(&self, level: PyramidLevel) -> usize {
        match level {
            PyramidLevel::Coarse => self.sides[0],
            PyramidLevel::Medium => self.sides[1],
            PyramidLevel::Fine => self.sides[2],
        }
    }

    fn forward(&self, x: &Tensor, stage: &'static str) -> Result<[Tensor; 3]> {
        check_batch(x, self.in_channels, self.in_res, stage)?;
        let mut h = lrelu(&self.stem.forward(x)?)?;
        let mut by_side = vec![(self.in_res, h.clone())];
        for down in &self.downs {
            h = lrelu(&down.forward(&h)?)?;
            by_side.push((h.dim(2)?, h.clone()));
        }
        let pick = |side: usize| {
            by_side
                .iter()
                .find(|(s, _)| *s == side)
                .map(|(_, t)| t.clone())
                .expect("backbone covers every pyramid side")
        };
        let up_to = |t: &Tensor, side: usize| -> Result<Tensor> {
            if t.dim(2)? == side {
                Ok(t.clone())
            } else {
                Ok(t.upsample_nearest2d(side, side)?)
            }
        };
        let coarse = pick(self.sides[0]);
        let medium = (self.lat_medium.forward(&pick(self.sides[1]))? + up_to(&coarse, self.sides[1])?)?;
        let fine = (self.lat_fine.forward(&pick(self.sides[2]))? + up_to(&medium, self.sides[2])?)?;
        Ok([coarse, medium, fine])
    }
}

fn level_index(level: PyramidLevel) -> usize {
    match level {
        PyramidLevel::Coarse => 0,
        PyramidLevel::Medium => 1,
        PyramidLevel::Fine => 2,
    }
}

fn build_heads(
    ps: &mut ParamStore,
    backbone: &PyramidBackbone,
    layout: &HeadLayout,
    rows: usize,
    latent_width: usize,
    zero_out: bool,
) -> Result<Vec<(PyramidLevel, MapToStyle)>> {
    (0..rows)
        .map(|r| {
            let level = layout.level_of(r);
            let head = MapToStyle::new(
                ps,
                &format!("head{r}"),
                backbone.fpn_channels,
                backbone.side(level),
                latent_width,
                zero_out,
            )?;
            Ok((level, head))
        })
        .collect()
}

fn run_heads(heads: &[(PyramidLevel, MapToStyle)], maps: &[Tensor; 3]) -> Result<Tensor> {
    let rows = heads
        .iter()
        .map(|(level, head)| head.forward(&maps[level_index(*level)]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&rows, 1)?)
}

/// Image-to-latent encoder: one head per latent row, grouped coarse / medium /
/// fine, added to a learned mean code.
#[derive(Debug)]
pub struct FaceInverter {
    store: ParamStore,
    latent_store: ParamStore,
    backbone: PyramidBackbone,
    heads: Vec<(PyramidLevel, MapToStyle)>,
    mean: Param,
    layout: HeadLayout,
    resolution: usize,
}

impl FaceInverter {
    pub fn new(
        cfg: &GeneratorConfig,
        structure_k: Option<usize>,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.num_latent_vectors();
        let k = match structure_k {
            Some(k) => k,
            None => structure_split_index(l)?,
        };
        let layout = HeadLayout::new(l, k)?;
        let mut ps = ParamStore::new("inv", seed, dtype, device);
        let backbone = PyramidBackbone::new(&mut ps, 3, cfg.resolution, cfg)?;
        let heads = build_heads(&mut ps, &backbone, &layout, l, cfg.latent_width, false)?;
        let mut latent_store = ParamStore::new("latent", seed, dtype, device);
        let mean = latent_store.constant("mean", &[l, cfg.latent_width], 0.0)?;
        Ok(Self {
            store: ps,
            latent_store,
            backbone,
            heads,
            mean,
            layout,
            resolution: cfg.resolution,
        })
    }

    pub fn stores(&self) -> [&ParamStore; 2] {
        [&self.store, &self.latent_store]
    }

    pub fn set_frozen(&self, frozen: bool) {
        self.store.set_frozen(frozen);
        self.latent_store.set_frozen(frozen);
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// `(B, 3, R, R)` images to a batched `(B, L, D)` code.
    pub fn invert(&self, images: &Tensor) -> Result<LatentCode> {
        let maps = self.backbone.forward(images, "invert_face")?;
        let rows = run_heads(&self.heads, &maps)?;
        let code = rows.broadcast_add(&self.mean.t().unsqueeze(0)?)?;
        LatentCode::from_graph(code, self.layout.structure_end)
    }
}

/// Heatmap-pair encoder predicting the structure transfer direction from the
/// coarse and medium levels only. Output projections start at zero, so a fresh
/// encoder predicts the zero direction.
#[derive(Debug)]
pub struct LandmarkEncoder {
    store: ParamStore,
    backbone: PyramidBackbone,
    heads: Vec<(PyramidLevel, MapToStyle)>,
    num_landmarks: usize,
    grid: usize,
}

impl LandmarkEncoder {
    pub fn new(
        cfg: &GeneratorConfig,
        structure_k: Option<usize>,
        num_landmarks: usize,
        grid: usize,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        if grid < 8 || !grid.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "landmark encoder grid must be a power of two >= 8, got {grid}"
            )));
        }
        let l = cfg.num_latent_vectors();
        let k = match structure_k {
            Some(k) => k,
            None => structure_split_index(l)?,
        };
        let layout = HeadLayout::new(l, k)?;
        let mut ps = ParamStore::new("lenc", seed, dtype, device);
        let backbone = PyramidBackbone::new(&mut ps, 2 * num_landmarks, grid, cfg)?;
        let heads = build_heads(&mut ps, &backbone, &layout, k, cfg.latent_width, true)?;
        Ok(Self {
            store: ps,
            backbone,
            heads,
            num_landmarks,
            grid,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn num_landmarks(&self) -> usize {
        self.num_landmarks
    }

    /// Source and target heatmaps `(B, N, G, G)` to a `(B, K, D)` direction.
    pub fn encode(&self, source: &Tensor, target: &Tensor) -> Result<TransferDirection> {
        if source.dims() != target.dims() {
            return Err(Error::shape(
                "encode_structure_direction",
                format!("source heatmaps {:?} vs target {:?}", source.dims(), target.dims()),
            ));
        }
        let x = Tensor::cat(&[source, target], 1)?;
        let maps = self.backbone.forward(&x, "encode_structure_direction")?;
        Ok(TransferDirection::from_graph(run_heads(&self.heads, &maps)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{rasterize_heatmaps, HeatmapStack, LandmarkSet};
    use crate::testutil::seeded_tensor;

    #[test]
    fn layouts() {
        let l18 = HeadLayout::new(18, 7).unwrap();
        assert_eq!((l18.coarse_end, l18.structure_end), (3, 7));
        let l10 = HeadLayout::new(10, 4).unwrap();
        assert_eq!(l10.coarse_end, 2);
        assert_eq!(l10.level_of(1), PyramidLevel::Coarse);
        assert_eq!(l10.level_of(3), PyramidLevel::Medium);
        assert_eq!(l10.level_of(4), PyramidLevel::Fine);
        assert!(HeadLayout::new(10, 10).is_err());
    }

    #[test]
    fn inverter_shapes_and_determinism() {
        let cfg = GeneratorConfig::toy(64);
        let inv = FaceInverter::new(&cfg, None, 3, DType::F64, &Device::Cpu).unwrap();
        let x = seeded_tensor(&[1, 3, 64, 64], 1, DType::F64);
        let a = inv.invert(&x).unwrap();
        assert_eq!(a.tensor().dims(), &[1, 10, 32]);
        assert_eq!(a.split_index(), 4);
        let b = inv.invert(&x).unwrap();
        assert_eq!(a.to_rows().unwrap(), b.to_rows().unwrap());

        let zero = Tensor::zeros((1, 3, 64, 64), DType::F64, &Device::Cpu).unwrap();
        let z = inv.invert(&zero).unwrap();
        assert!(z.to_rows().unwrap().iter().flatten().all(|v| v.is_finite()));

        let wrong = Tensor::zeros((1, 3, 32, 32), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(inv.invert(&wrong), Err(Error::Shape { .. })));
    }

    fn heatmaps(n: usize, grid: usize, shift: f64) -> Tensor {
        let pts: Vec<[f64; 2]> = (0..n).map(|i| [0.2 + 0.05 * i as f64 + shift, 0.3 + shift]).collect();
        let h = rasterize_heatmaps(&LandmarkSet::new(pts).unwrap(), grid, 1.0).unwrap();
        HeatmapStack::batch(&[h], DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn fresh_landmark_encoder_is_zero() {
        let cfg = GeneratorConfig::toy(64);
        let enc = LandmarkEncoder::new(&cfg, None, 5, 16, 9, DType::F64, &Device::Cpu).unwrap();
        let n = enc.encode(&heatmaps(5, 16, 0.0), &heatmaps(5, 16, 0.1)).unwrap();
        assert_eq!(n.tensor().dims(), &[1, 4, 32]);
        assert!(n.to_rows().unwrap().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn landmark_encoder_rejects_mismatched_grids() {
        let cfg = GeneratorConfig::toy(64);
        let enc = LandmarkEncoder::new(&cfg, None, 5, 16, 9, DType::F64, &Device::Cpu).unwrap();
        assert!(enc.encode(&heatmaps(5, 16, 0.0), &heatmaps(5, 32, 0.0)).is_err());
        assert!(enc.encode(&heatmaps(5, 32, 0.0), &heatmaps(5, 32, 0.0)).is_err());
    }
}
