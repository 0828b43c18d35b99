use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Facial landmarks in normalized image coordinates (`x` right, `y` down).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    /// Points outside `[0, 1]^2` are accepted here and clamped at rasterization.
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("landmark set is empty".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("landmark coordinates must be finite".into()));
        }
        Ok(Self { points })
    }

    /// Reads `[x0, y0, x1, y1, ...]`.
    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if coords.len() % 2 != 0 {
            return Err(Error::InvalidArgument("odd number of landmark coordinates".into()));
        }
        Self::new(coords.chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.points.iter().flatten().all(|v| (0.0..=1.0).contains(v))
    }
}

/// `N` Gaussian heatmaps on a `G x G` grid.
#[derive(Clone, Debug)]
pub struct HeatmapStack {
    data: Vec<f64>,
    channels: usize,
    grid: usize,
    clamped: usize,
}

impl HeatmapStack {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    /// Number of landmarks that fell outside `[0, 1]^2` and were clamped.
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    pub fn at(&self, channel: usize, v: usize, u: usize) -> f64 {
        self.data[(channel * self.grid + v) * self.grid + u]
    }

    pub fn channel_max(&self, channel: usize) -> f64 {
        let g2 = self.grid * self.grid;
        self.data[channel * g2..(channel + 1) * g2]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(N, G, G)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (self.channels, self.grid, self.grid), device)?.to_dtype(dtype)?)
    }

    /// `(B, N, G, G)` tensor from equally shaped stacks.
    pub fn batch(stacks: &[HeatmapStack], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = stacks
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty heatmap batch".into()))?;
        if stacks.iter().any(|s| s.channels != first.channels || s.grid != first.grid) {
            return Err(Error::shape("heatmap batch", "stacks differ in landmark count or grid"));
        }
        let ts = stacks
            .iter()
            .map(|s| s.to_tensor(dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    }
}

/// Rasterizes one Gaussian per landmark at integer pixel centres; pixel
/// `(u, v)` sits at normalized position `(u / (G-1), v / (G-1))`.
pub fn rasterize_heatmaps(landmarks: &LandmarkSet, grid: usize, sigma: f64) -> Result<HeatmapStack> {
    if grid < 8 {
        return Err(Error::InvalidArgument(format!("heatmap grid must be >= 8, got {grid}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let n = landmarks.len();
    let scale = (grid - 1) as f64;
    let denom = 2.0 * sigma * sigma;
    let mut clamped = 0;
    let mut data = vec![0.0; n * grid * grid];
    for (c, p) in landmarks.points().iter().enumerate() {
        let (x, y) = (p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0));
        if x != p[0] || y != p[1] {
            clamped += 1;
        }
        let (cx, cy) = (x * scale, y * scale);
        let plane = &mut data[c * grid * grid..(c + 1) * grid * grid];
        for v in 0..grid {
            let dy = v as f64 - cy;
            for u in 0..grid {
                let dx = u as f64 - cx;
                plane[v * grid + u] = (-(dx * dx + dy * dy) / denom).exp();
            }
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} landmark(s) outside the unit square were clamped");
    }
    Ok(HeatmapStack {
        data,
        channels: n,
        grid,
        clamped,
    })
}
