//! Inner-face masks and the per-level feature aggregation that swaps target
//! features for generator features inside the face region.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nets::FeaturePyramid;

/// Binary single-channel mask at image resolution; 1 marks the inner face.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceMask {
    values: Vec<f64>,
    side: usize,
}

impl FaceMask {
    pub fn new(values: Vec<f64>, side: usize) -> Result<Self> {
        if values.len() != side * side || side == 0 {
            return Err(Error::shape("face mask", format!("{} values for side {side}", values.len())));
        }
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("face mask values must be 0 or 1".into()));
        }
        Ok(Self { values, side })
    }

    pub fn filled(side: usize, value: bool) -> Self {
        Self {
            values: vec![if value { 1.0 } else { 0.0 }; side * side],
            side,
        }
    }

    /// Axis-aligned box `[x0, x1) x [y0, y1)` in pixels.
    pub fn rect(side: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        let mut values = vec![0.0; side * side];
        for y in y0.min(side)..y1.min(side) {
            for x in x0.min(side)..x1.min(side) {
                values[y * side + x] = 1.0;
            }
        }
        Self { values, side }
    }

    /// Filled ellipse with centre and radii in normalized coordinates.
    pub fn ellipse(side: usize, cx: f64, cy: f64, rx: f64, ry: f64) -> Self {
        let mut values = vec![0.0; side * side];
        for y in 0..side {
            for x in 0..side {
                let u = ((x as f64 + 0.5) / side as f64 - cx) / rx;
                let v = ((y as f64 + 0.5) / side as f64 - cy) / ry;
                if u * u + v * v <= 1.0 {
                    values[y * side + x] = 1.0;
                }
            }
        }
        Self { values, side }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.side + x]
    }

    /// `(1, S, S)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.values.clone(), (1, self.side, self.side), device)?.to_dtype(dtype)?)
    }

    pub fn batch(masks: &[FaceMask], dtype: DType, device: &Device) -> Result<Tensor> {
        let ts = masks.iter().map(|m| m.to_tensor(dtype, device)).collect::<Result<Vec<_>>>()?;
        if ts.is_empty() {
            return Err(Error::InvalidArgument("empty mask batch".into()));
        }
        Ok(Tensor::stack(&ts, 0)?)
    }
}

/// Area-averaged mask at a pyramid resolution, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    values: Vec<f64>,
    side: usize,
}

impl SoftMask {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Thresholds at 0.5, recovering literal replacement.
    pub fn hardened(&self) -> SoftMask {
        SoftMask {
            values: self.values.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
            side: self.side,
        }
    }

    /// `(1, S, S)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.values.clone(), (1, self.side, self.side), device)?.to_dtype(dtype)?)
    }
}

/// Mean over non-overlapping `f x f` blocks, `f = mask side / level side`.
pub fn downsample_mask(mask: &FaceMask, level_resolution: usize) -> Result<SoftMask> {
    if level_resolution == 0 || mask.side % level_resolution != 0 {
        return Err(Error::InvalidArgument(format!(
            "level resolution {level_resolution} does not divide mask side {}",
            mask.side
        )));
    }
    let f = mask.side / level_resolution;
    let area = (f * f) as f64;
    let mut values = vec![0.0; level_resolution * level_resolution];
    for (i, out) in values.iter_mut().enumerate() {
        let (by, bx) = (i / level_resolution, i % level_resolution);
        let mut sum = 0.0;
        for y in by * f..(by + 1) * f {
            for x in bx * f..(bx + 1) * f {
                sum += mask.values[y * mask.side + x];
            }
        }
        *out = sum / area;
    }
    Ok(SoftMask {
        values,
        side: level_resolution,
    })
}

/// `m * f_s + (1 - m) * f_t` with `m` broadcast over channels. `mask` is
/// `(B, 1, h, w)` or `(1, 1, h, w)`.
pub fn aggregate_level(f_s: &Tensor, f_t: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if f_s.dims() != f_t.dims() {
        return Err(Error::shape(
            "aggregate_level",
            format!("source features {:?} vs target {:?}", f_s.dims(), f_t.dims()),
        ));
    }
    let (b, _, h, w) = f_s.dims4()?;
    let md = mask.dims();
    if md.len() != 4 || md[1] != 1 || md[2] != h || md[3] != w || (md[0] != b && md[0] != 1) {
        return Err(Error::shape(
            "aggregate_level",
            format!("mask {md:?} does not match features {:?}", f_s.dims()),
        ));
    }
    // f_t + m (f_s - f_t) is exact for m = 0 and for equal operands; m = 1
    // selects f_s directly
    let blend = (f_t + (f_s - f_t)?.broadcast_mul(mask)?)?;
    let take_source = mask.ge(1.0)?.broadcast_as(f_s.shape())?;
    Ok(take_source.where_cond(f_s, &blend)?)
}

/// Per-level blend of generator and target features under the target masks
/// (one mask per batch item, or one mask shared by the batch).
pub fn aggregate_pyramid(
    source: &FeaturePyramid,
    target: &FeaturePyramid,
    masks: &[FaceMask],
    hard_mask: bool,
) -> Result<FeaturePyramid> {
    if source.len() != target.len() {
        return Err(Error::shape(
            "aggregate_pyramid",
            format!("{} source levels vs {} target levels", source.len(), target.len()),
        ));
    }
    if masks.is_empty() {
        return Err(Error::InvalidArgument("no masks given".into()));
    }
    let mut out = Vec::with_capacity(source.len());
    for (f_s, f_t) in source.levels().iter().zip(target.levels()) {
        let side = f_s.dim(2)?;
        let soft = masks
            .iter()
            .map(|m| {
                let s = downsample_mask(m, side)?;
                let s = if hard_mask { s.hardened() } else { s };
                s.to_tensor(f_s.dtype(), f_s.device())
            })
            .collect::<Result<Vec<_>>>()?;
        let m = Tensor::stack(&soft, 0)?;
        out.push(aggregate_level(f_s, f_t, &m)?);
    }
    FeaturePyramid::new(out)
}
