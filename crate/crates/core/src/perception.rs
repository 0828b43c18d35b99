//! Provider interfaces for the frozen auxiliary networks (identity embedding,
//! landmark estimation, perceptual features, optical flow, pose/expression),
//! with deterministic seeded toy implementations.
//!
//! The toy networks are fixed random convolution stacks. They are never
//! trained; they only honour the shape, range and differentiability contracts
//! that the losses and metrics rely on. Real models can be registered under
//! new keys in a [`ProviderRegistry`].

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::{Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nets::layers::lrelu;
use crate::nets::Image;
use crate::video::FlowField;

/// `(B, 3, R, R) -> (B, E)` unit-norm identity embeddings.
pub trait IdentityEmbedder: Send + Sync {
    fn embed(&self, images: &Tensor) -> Result<Tensor>;
}

/// `(B, 3, R, R) -> (B, 2N)` flattened `[x0, y0, x1, y1, ...]` coordinates.
pub trait LandmarkEstimator: Send + Sync {
    fn estimate(&self, images: &Tensor) -> Result<Tensor>;
}

/// `(B, 3, R, R) -> (B, F)` perceptual feature vectors.
pub trait PerceptualExtractor: Send + Sync {
    fn features(&self, images: &Tensor) -> Result<Tensor>;
}

/// Optical flow from `a` to `b` in pixels.
pub trait FlowEstimator: Send + Sync {
    fn flow(&self, a: &Image, b: &Image) -> Result<FlowField>;
}

/// Metric-only image descriptor (pose or expression).
pub trait AttributeEstimator: Send + Sync {
    fn features(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Fixed conv layer kept in f64 and cast to the input dtype on use, so one
/// provider serves both f32 training and f64 gradient checks.
#[derive(Debug, Clone)]
struct FixedConv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl FixedConv {
    fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let w: Vec<f64> = (0..c_out * c_in * kernel * kernel).map(|_| normal.sample(rng)).collect();
        let b: Vec<f64> = (0..c_out).map(|_| 0.1 * normal.sample(rng)).collect();
        Ok(Self {
            weight: Tensor::from_vec(w, (c_out, c_in, kernel, kernel), &Device::Cpu)?,
            bias: Tensor::from_vec(b, (1, c_out, 1, 1), &Device::Cpu)?,
            stride,
            padding: kernel / 2,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (w, b) = (
            self.weight.to_dtype(x.dtype())?.to_device(x.device())?,
            self.bias.to_dtype(x.dtype())?.to_device(x.device())?,
        );
        Ok(x.conv2d(&w, self.padding, self.stride, 1, 1)?.broadcast_add(&b)?)
    }
}

fn check_images(images: &Tensor, what: &'static str) -> Result<()> {
    let d = images.dims();
    if d.len() != 4 || d[1] != 3 || d[2] != d[3] || d[2] < 8 {
        return Err(Error::shape(what, format!("expected (B, 3, R, R) with R >= 8, got {d:?}")));
    }
    Ok(())
}

/// Three stride-2 convolutions, global average pooling, a fixed bias vector,
/// then L2 normalization to a 64-dimensional unit vector.
#[derive(Debug, Clone)]
pub struct ToyIdentityEmbedder {
    convs: [FixedConv; 3],
    bias: Tensor,
}

pub const TOY_EMBEDDING_DIM: usize = 64;

impl ToyIdentityEmbedder {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d);
        let convs = [
            FixedConv::new(&mut rng, 3, 16, 3, 2)?,
            FixedConv::new(&mut rng, 16, 32, 3, 2)?,
            FixedConv::new(&mut rng, 32, TOY_EMBEDDING_DIM, 3, 2)?,
        ];
        let normal = Normal::new(0.0, 0.5).expect("valid std");
        let b: Vec<f64> = (0..TOY_EMBEDDING_DIM).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            convs,
            bias: Tensor::from_vec(b, (1, TOY_EMBEDDING_DIM), &Device::Cpu)?,
        })
    }

    /// Pooled features before normalization.
    pub fn raw_features(&self, images: &Tensor) -> Result<Tensor> {
        check_images(images, "toy_identity_embed")?;
        let mut h = images.clone();
        for conv in &self.convs {
            h = lrelu(&conv.forward(&h)?)?;
        }
        let pooled = h.mean((2, 3))?;
        Ok(pooled.broadcast_add(&self.bias.to_dtype(images.dtype())?)?)
    }
}

impl IdentityEmbedder for ToyIdentityEmbedder {
    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let f = self.raw_features(images)?;
        let norm = f.sqr()?.sum_keepdim(1)?.sqrt()?;
        Ok(f.broadcast_div(&norm)?)
    }
}

/// Spatial soft-argmax of `(B, N, S, S)` logits to `(B, 2N)` coordinates in
/// `[0, 1]`, pixel centre `u` mapping to `u / (S - 1)`.
pub fn soft_argmax(logits: &Tensor) -> Result<Tensor> {
    let (b, n, s, s2) = logits.dims4()?;
    if s != s2 || s < 2 {
        return Err(Error::shape("soft_argmax", format!("expected square maps, got {:?}", logits.dims())));
    }
    let flat = logits.reshape((b, n, s * s))?;
    let max = flat.max_keepdim(D::Minus1)?.detach();
    let e = flat.broadcast_sub(&max)?.exp()?;
    let p = e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?;
    let grid: Vec<f64> = (0..s).map(|u| u as f64 / (s - 1) as f64).collect();
    let mut gx = Vec::with_capacity(s * s);
    let mut gy = Vec::with_capacity(s * s);
    for v in 0..s {
        for u in 0..s {
            gx.push(grid[u]);
            gy.push(grid[v]);
        }
    }
    let coords = Tensor::from_vec([gx, gy].concat(), (2, s * s), logits.device())?.to_dtype(logits.dtype())?;
    // (B, N, S*S) x (S*S, 2) -> (B, N, 2), then interleave as x0, y0, x1, y1...
    let xy = p.reshape((b * n, s * s))?.matmul(&coords.t()?)?;
    Ok(xy.reshape((b, 2 * n))?)
}

/// Two stride-2 convolutions, one 1x1 heatmap head per landmark, soft-argmax.
#[derive(Debug, Clone)]
pub struct ToyLandmarkEstimator {
    convs: [FixedConv; 2],
    head: FixedConv,
    num_landmarks: usize,
}

impl ToyLandmarkEstimator {
    pub fn new(seed: u64, num_landmarks: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2e);
        Ok(Self {
            convs: [FixedConv::new(&mut rng, 3, 16, 3, 2)?, FixedConv::new(&mut rng, 16, 16, 3, 2)?],
            head: FixedConv::new(&mut rng, 16, num_landmarks, 1, 1)?,
            num_landmarks,
        })
    }

    pub fn num_landmarks(&self) -> usize {
        self.num_landmarks
    }
}

impl LandmarkEstimator for ToyLandmarkEstimator {
    fn estimate(&self, images: &Tensor) -> Result<Tensor> {
        check_images(images, "toy_landmark_estimate")?;
        let mut h = images.clone();
        for conv in &self.convs {
            h = lrelu(&conv.forward(&h)?)?;
        }
        soft_argmax(&self.head.forward(&h)?)
    }
}

/// Three stride-2 conv levels; all activations flattened and concatenated.
#[derive(Debug, Clone)]
pub struct ToyPerceptualExtractor {
    convs: [FixedConv; 3],
}

impl ToyPerceptualExtractor {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3f);
        Ok(Self {
            convs: [
                FixedConv::new(&mut rng, 3, 8, 3, 2)?,
                FixedConv::new(&mut rng, 8, 16, 3, 2)?,
                FixedConv::new(&mut rng, 16, 16, 3, 2)?,
            ],
        })
    }
}

impl PerceptualExtractor for ToyPerceptualExtractor {
    fn features(&self, images: &Tensor) -> Result<Tensor> {
        check_images(images, "toy_perceptual_features")?;
        let b = images.dim(0)?;
        let mut h = images.clone();
        let mut parts = Vec::with_capacity(3);
        for conv in &self.convs {
            h = lrelu(&conv.forward(&h)?)?;
            parts.push(h.reshape((b, ()))?);
        }
        Ok(Tensor::cat(&parts, 1)?)
    }
}

/// Global-translation flow by exhaustive integer search over `[-R, R]^2`,
/// `R = resolution / 8`, minimizing the mean absolute difference of the
/// overlapping region. Ties go to the smallest displacement, then the
/// lexicographically smallest `(dx, dy)`.
#[derive(Debug, Clone, Default)]
pub struct ToyFlowEstimator;

impl ToyFlowEstimator {
    /// Best displacement `(dx, dy)` such that `b(x + dx, y + dy) ~ a(x, y)`.
    pub fn search(a: &Image, b: &Image) -> Result<(i64, i64)> {
        let side = a.resolution();
        if b.resolution() != side {
            return Err(Error::shape("toy_flow_estimate", "frames differ in resolution"));
        }
        let (av, bv) = (a.to_vec()?, b.to_vec()?);
        let r = (side / 8) as i64;
        let mut candidates: Vec<(i64, i64)> = (-r..=r).flat_map(|dx| (-r..=r).map(move |dy| (dx, dy))).collect();
        candidates.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dx, dy));
        let s = side as i64;
        let mut best = (0, 0);
        let mut best_cost = f64::INFINITY;
        for (dx, dy) in candidates {
            let (x0, x1) = (0.max(-dx), s.min(s - dx));
            let (y0, y1) = (0.max(-dy), s.min(s - dy));
            let mut sum = 0.0;
            let mut count = 0usize;
            for c in 0..3 {
                let plane = c * side * side;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let pa = plane + (y * s + x) as usize;
                        let pb = plane + ((y + dy) * s + x + dx) as usize;
                        sum += (av[pa] - bv[pb]).abs();
                        count += 1;
                    }
                }
            }
            let cost = sum / count as f64;
            if cost < best_cost {
                best_cost = cost;
                best = (dx, dy);
            }
        }
        Ok(best)
    }
}

impl FlowEstimator for ToyFlowEstimator {
    fn flow(&self, a: &Image, b: &Image) -> Result<FlowField> {
        let (dx, dy) = Self::search(a, b)?;
        let side = a.resolution();
        Ok(analytic_translation_flow((dx as f64, dy as f64), side, side))
    }
}

/// Constant flow field equal to `v` everywhere.
pub fn analytic_translation_flow(v: (f64, f64), height: usize, width: usize) -> FlowField {
    FlowField::constant(v, height, width)
}

/// Flow provider that reports a known per-frame velocity: the flow from frame
/// `i` to frame `j` is `(j - i) * v`. Frames are identified by their position
/// in the sequence handed to the loss, so this provider is used through
/// [`crate::video::flow_trajectory_loss_with`].
#[derive(Debug, Clone)]
pub struct AnalyticTranslationFlow {
    pub velocity: (f64, f64),
}

fn quadrant_bounds(side: usize) -> [(usize, usize, usize, usize); 4] {
    let h = side / 2;
    [(0, h, 0, h), (h, side, 0, h), (0, h, h, side), (h, side, h, side)]
}

/// Mean intensity of each image quadrant.
#[derive(Debug, Clone, Default)]
pub struct ToyPoseEstimator;

impl AttributeEstimator for ToyPoseEstimator {
    fn features(&self, image: &Image) -> Result<Vec<f64>> {
        let side = image.resolution();
        let v = image.to_vec()?;
        Ok(quadrant_bounds(side)
            .iter()
            .map(|&(x0, x1, y0, y1)| {
                let mut sum = 0.0;
                for c in 0..3 {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += v[(c * side + y) * side + x];
                        }
                    }
                }
                sum / (3 * (x1 - x0) * (y1 - y0)) as f64
            })
            .collect())
    }
}

/// Mean absolute horizontal and vertical finite difference per quadrant,
/// `[h0, v0, h1, v1, h2, v2, h3, v3]`.
#[derive(Debug, Clone, Default)]
pub struct ToyExpressionEstimator;

impl AttributeEstimator for ToyExpressionEstimator {
    fn features(&self, image: &Image) -> Result<Vec<f64>> {
        let side = image.resolution();
        let v = image.to_vec()?;
        let at = |c: usize, x: usize, y: usize| v[(c * side + y) * side + x];
        let mut out = Vec::with_capacity(8);
        for (x0, x1, y0, y1) in quadrant_bounds(side) {
            let (mut gh, mut nh, mut gv, mut nv) = (0.0, 0usize, 0.0, 0usize);
            for c in 0..3 {
                for y in y0..y1 {
                    for x in x0..x1 {
                        if x + 1 < side {
                            gh += (at(c, x + 1, y) - at(c, x, y)).abs();
                            nh += 1;
                        }
                        if y + 1 < side {
                            gv += (at(c, x, y + 1) - at(c, x, y)).abs();
                            nv += 1;
                        }
                    }
                }
            }
            out.push(gh / nh.max(1) as f64);
            out.push(gv / nv.max(1) as f64);
        }
        Ok(out)
    }
}

/// The auxiliary networks consumed by losses, the video driver and metrics.
#[derive(Clone)]
pub struct ProviderSet {
    pub identity: Arc<dyn IdentityEmbedder>,
    pub landmarks: Arc<dyn LandmarkEstimator>,
    pub perceptual: Arc<dyn PerceptualExtractor>,
    pub flow: Arc<dyn FlowEstimator>,
    pub pose: Arc<dyn AttributeEstimator>,
    pub expression: Arc<dyn AttributeEstimator>,
}

impl std::fmt::Debug for ProviderSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ProviderSet { .. }")
    }
}

impl ProviderSet {
    pub fn toy(seed: u64, num_landmarks: usize) -> Result<Self> {
        ProviderRegistry::with_defaults().build(&ProviderKeys::default(), &ProviderContext { seed, num_landmarks })
    }
}

/// Registry key per provider slot, as read from the `[providers]` section.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ProviderKeys {
    pub identity: String,
    pub landmarks: String,
    pub perceptual: String,
    pub flow: String,
    pub pose: String,
    pub expression: String,
}

impl Default for ProviderKeys {
    fn default() -> Self {
        let toy = || "toy".to_string();
        Self {
            identity: toy(),
            landmarks: toy(),
            perceptual: toy(),
            flow: toy(),
            pose: toy(),
            expression: toy(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProviderContext {
    pub seed: u64,
    pub num_landmarks: usize,
}

type Factory<T> = Box<dyn Fn(&ProviderContext) -> Result<Arc<T>> + Send + Sync>;

/// String-keyed provider constructors.
pub struct ProviderRegistry {
    identity: BTreeMap<String, Factory<dyn IdentityEmbedder>>,
    landmarks: BTreeMap<String, Factory<dyn LandmarkEstimator>>,
    perceptual: BTreeMap<String, Factory<dyn PerceptualExtractor>>,
    flow: BTreeMap<String, Factory<dyn FlowEstimator>>,
    pose: BTreeMap<String, Factory<dyn AttributeEstimator>>,
    expression: BTreeMap<String, Factory<dyn AttributeEstimator>>,
}

fn lookup<'a, T: ?Sized>(map: &'a BTreeMap<String, Factory<T>>, slot: &str, key: &str) -> Result<&'a Factory<T>> {
    map.get(key)
        .ok_or_else(|| Error::InvalidConfig(format!("no {slot} provider registered under `{key}`")))
}

impl ProviderRegistry {
    pub fn empty() -> Self {
        Self {
            identity: BTreeMap::new(),
            landmarks: BTreeMap::new(),
            perceptual: BTreeMap::new(),
            flow: BTreeMap::new(),
            pose: BTreeMap::new(),
            expression: BTreeMap::new(),
        }
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register_identity("toy", |c| Ok(Arc::new(ToyIdentityEmbedder::new(c.seed)?)));
        r.register_landmarks("toy", |c| Ok(Arc::new(ToyLandmarkEstimator::new(c.seed, c.num_landmarks)?)));
        r.register_perceptual("toy", |c| Ok(Arc::new(ToyPerceptualExtractor::new(c.seed)?)));
        r.register_flow("toy", |_| Ok(Arc::new(ToyFlowEstimator)));
        r.register_pose("toy", |_| Ok(Arc::new(ToyPoseEstimator)));
        r.register_expression("toy", |_| Ok(Arc::new(ToyExpressionEstimator)));
        r
    }

    pub fn register_identity<F>(&mut self, key: &str, f: F)
    where
        F: Fn(&ProviderContext) -> Result<Arc<dyn IdentityEmbedder>> + Send + Sync + 'static,
    {
        self.identity.insert(key.to_string(), Box::new(f));
    }

    pub fn register_landmarks<F>(&mut self, key: &str, f: F)
    where
        F: Fn(&ProviderContext) -> Result<Arc<dyn LandmarkEstimator>> + Send + Sync + 'static,
    {
        self.landmarks.insert(key.to_string(), Box::new(f));
    }

    pub fn register_perceptual<F>(&mut self, key: &str, f: F)
    where
        F: Fn(&ProviderContext) -> Result<Arc<dyn PerceptualExtractor>> + Send + Sync + 'static,
    {
        self.perceptual.insert(key.to_string(), Box::new(f));
    }

    pub fn register_flow<F>(&mut self, key: &str, f: F)
    where
        F: Fn(&ProviderContext) -> Result<Arc<dyn FlowEstimator>> + Send + Sync + 'static,
    {
        self.flow.insert(key.to_string(), Box::new(f));
    }

    pub fn register_pose<F>(&mut self, key: &str, f: F)
    where
        F: Fn(&ProviderContext) -> Result<Arc<dyn AttributeEstimator>> + Send + Sync + 'static,
    {
        self.pose.insert(key.to_string(), Box::new(f));
    }

    pub fn register_expression<F>(&mut self, key: &str, f: F)
    where
        F: Fn(&ProviderContext) -> Result<Arc<dyn AttributeEstimator>> + Send + Sync + 'static,
    {
        self.expression.insert(key.to_string(), Box::new(f));
    }

    pub fn build(&self, keys: &ProviderKeys, ctx: &ProviderContext) -> Result<ProviderSet> {
        Ok(ProviderSet {
            identity: lookup(&self.identity, "identity", &keys.identity)?(ctx)?,
            landmarks: lookup(&self.landmarks, "landmark", &keys.landmarks)?(ctx)?,
            perceptual: lookup(&self.perceptual, "perceptual", &keys.perceptual)?(ctx)?,
            flow: lookup(&self.flow, "flow", &keys.flow)?(ctx)?,
            pose: lookup(&self.pose, "pose", &keys.pose)?(ctx)?,
            expression: lookup(&self.expression, "expression", &keys.expression)?(ctx)?,
        })
    }
}

/// Shifts an image by whole pixels, filling uncovered pixels with `fill`.
pub fn translate_image(image: &Image, dx: i64, dy: i64, fill: f64) -> Result<Image> {
    let side = image.resolution();
    let v = image.to_vec()?;
    let s = side as i64;
    let mut out = vec![fill; v.len()];
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let (sx, sy) = (x - dx, y - dy);
                if (0..s).contains(&sx) && (0..s).contains(&sy) {
                    out[(c * side) * side + (y * s + x) as usize] = v[(c * side) * side + (sy * s + sx) as usize];
                }
            }
        }
    }
    Image::from_chw(out, side, image.dtype(), image.tensor().device())
}
