//! Temporal constraints for video swapping and the per-video driver.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::blending::FaceMask;
use crate::error::{Error, Result};
use crate::latent::StructureCode;
use crate::losses::mse;
use crate::nets::{Image, LandmarkSet};
use crate::perception::{AnalyticTranslationFlow, FlowEstimator};

/// Ordered frames of one clip, with optional per-frame landmarks and masks.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    frames: Vec<Image>,
    landmarks: Option<Vec<LandmarkSet>>,
    masks: Option<Vec<FaceMask>>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::InvalidArgument("a frame sequence needs at least one frame".into()));
        };
        let side = first.resolution();
        if let Some(i) = frames.iter().position(|f| f.resolution() != side) {
            return Err(Error::shape(
                "frame_sequence",
                format!("frame {i} is {}px, frame 0 is {side}px", frames[i].resolution()),
            ));
        }
        Ok(Self {
            frames,
            landmarks: None,
            masks: None,
        })
    }

    pub fn with_landmarks(mut self, landmarks: Vec<LandmarkSet>) -> Result<Self> {
        if landmarks.len() != self.frames.len() {
            return Err(Error::InvalidArgument(format!(
                "{} landmark sets for {} frames",
                landmarks.len(),
                self.frames.len()
            )));
        }
        self.landmarks = Some(landmarks);
        Ok(self)
    }

    pub fn with_masks(mut self, masks: Vec<FaceMask>) -> Result<Self> {
        if masks.len() != self.frames.len() {
            return Err(Error::InvalidArgument(format!(
                "{} masks for {} frames",
                masks.len(),
                self.frames.len()
            )));
        }
        self.masks = Some(masks);
        Ok(self)
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn landmarks(&self) -> Option<&[LandmarkSet]> {
        self.landmarks.as_deref()
    }

    pub fn masks(&self) -> Option<&[FaceMask]> {
        self.masks.as_deref()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.frames[0].resolution()
    }
}

/// Per-pixel displacement `(dx, dy)` in pixels, stored as a `(2, H, W)` tensor.
#[derive(Clone, Debug)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn new(t: Tensor) -> Result<Self> {
        let d = t.dims();
        if d.len() != 3 || d[0] != 2 {
            return Err(Error::shape("flow_field", format!("expected (2, H, W), got {d:?}")));
        }
        let values = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("flow field contains non-finite entries".into()));
        }
        Ok(Self(t))
    }

    pub fn constant(v: (f64, f64), height: usize, width: usize) -> Self {
        let n = height * width;
        let mut data = vec![v.0; n];
        data.extend(std::iter::repeat(v.1).take(n));
        Self(Tensor::from_vec(data, (2, height, width), &Device::Cpu).expect("sizes agree"))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn data(&self) -> Vec<f64> {
        self.0
            .to_dtype(DType::F64)
            .and_then(|t| t.flatten_all())
            .and_then(|t| t.to_vec1::<f64>())
            .expect("flow field is a dense f64-convertible tensor")
    }

    pub fn height(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[2]
    }
}

impl AnalyticTranslationFlow {
    /// Flow from frame `i` to frame `j` under constant velocity.
    pub fn between(&self, i: usize, j: usize, height: usize, width: usize) -> FlowField {
        let steps = j as f64 - i as f64;
        FlowField::constant((steps * self.velocity.0, steps * self.velocity.1), height, width)
    }
}

/// Stacks `(M, K, D)` structure codes, checking count and shapes.
fn stack_codes(codes: &[StructureCode], what: &str) -> Result<Tensor> {
    let first = codes[0].tensor().dims().to_vec();
    if codes.iter().any(|c| c.tensor().dims() != first.as_slice()) {
        return Err(Error::shape("code_trajectory_loss", format!("{what} codes differ in shape")));
    }
    Ok(Tensor::stack(&codes.iter().map(|c| c.tensor().clone()).collect::<Vec<_>>(), 0)?)
}

/// `mean_k MSE(ĝ^k - ĝ^{k-1}, g_t^k - g_t^{k-1})` over `k = 1..M-1`.
pub fn code_trajectory_loss(swap: &[StructureCode], target: &[StructureCode]) -> Result<Tensor> {
    if swap.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "{} swapped codes vs {} target codes",
            swap.len(),
            target.len()
        )));
    }
    if swap.len() < 2 {
        return Err(Error::InvalidArgument("code_trajectory_loss needs at least 2 frames".into()));
    }
    code_trajectory_loss_stacked(&stack_codes(swap, "swapped")?, &stack_codes(target, "target")?)
}

/// Same as [`code_trajectory_loss`] on codes stacked along dimension 0.
/// Every offset has the same size, so the mean of per-step MSEs equals one
/// MSE over all offsets.
pub fn code_trajectory_loss_stacked(swap: &Tensor, target: &Tensor) -> Result<Tensor> {
    if swap.dims() != target.dims() {
        return Err(Error::shape(
            "code_trajectory_loss",
            format!("{:?} vs {:?}", swap.dims(), target.dims()),
        ));
    }
    let m = swap.dim(0)?;
    if m < 2 {
        return Err(Error::InvalidArgument("code_trajectory_loss needs at least 2 frames".into()));
    }
    let offsets = |t: &Tensor| -> Result<Tensor> { Ok((t.narrow(0, 1, m - 1)? - t.narrow(0, 0, m - 1)?)?) };
    mse(&offsets(swap)?, &offsets(target)?)
}

/// Bracket used inside each frame triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    /// `(f_{k=>k+2} + f_{k+2=>k}) / 2 - f_{k=>k+1}`
    #[default]
    Literal,
    /// `(f_{k=>k+2} - f_{k+2=>k}) / 4 - f_{k=>k+1}`, zero for uniform motion.
    Midpoint,
}

/// How per-triple residuals are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FtAggregation {
    /// Sum over triples of the root-mean-square residual.
    #[default]
    Group,
    /// Mean over triples of the mean-square residual.
    PlainMse,
}

impl std::str::FromStr for FlowMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "midpoint" => Ok(Self::Midpoint),
            other => Err(Error::InvalidConfig(format!("flow mode must be literal or midpoint, got `{other}`"))),
        }
    }
}

impl std::str::FromStr for FtAggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "group" => Ok(Self::Group),
            "plain_mse" => Ok(Self::PlainMse),
            other => Err(Error::InvalidConfig(format!(
                "ft_aggregation must be group or plain_mse, got `{other}`"
            ))),
        }
    }
}

/// Flows `(f_{k=>k+1}, f_{k=>k+2}, f_{k+2=>k})` of one frame triple, each `(2, H, W)`.
pub type FlowTriple = (Tensor, Tensor, Tensor);

/// Trajectory penalty over precomputed flow triples; differentiable in the flows.
pub fn flow_trajectory_penalty(triples: &[FlowTriple], mode: FlowMode, aggregation: FtAggregation) -> Result<Tensor> {
    let Some(first) = triples.first() else {
        return Err(Error::InvalidArgument("flow_trajectory_loss needs at least one frame triple".into()));
    };
    let mut acc: Option<Tensor> = None;
    for (f01, f02, f20) in triples {
        let bracket = match mode {
            FlowMode::Literal => (f02 + f20)?.affine(0.5, 0.0)?,
            FlowMode::Midpoint => (f02 - f20)?.affine(0.25, 0.0)?,
        };
        let ms = (bracket - f01)?.sqr()?.mean_all()?;
        let term = match aggregation {
            FtAggregation::Group => ms.sqrt()?,
            FtAggregation::PlainMse => ms,
        };
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    let total = acc.unwrap_or(first.0.zeros_like()?);
    Ok(match aggregation {
        FtAggregation::Group => total,
        FtAggregation::PlainMse => total.affine(1.0 / triples.len() as f64, 0.0)?,
    })
}

/// Trajectory penalty over `m` frames, with `flow(i, j)` giving the flow from
/// frame `i` to frame `j`.
pub fn flow_trajectory_loss_with<F>(m: usize, flow: F, mode: FlowMode, aggregation: FtAggregation) -> Result<f64>
where
    F: Fn(usize, usize) -> Result<FlowField>,
{
    if m < 3 {
        return Err(Error::InvalidArgument("flow_trajectory_loss needs at least 3 frames".into()));
    }
    let triples = (0..m - 2)
        .map(|k| {
            Ok((
                flow(k, k + 1)?.tensor().to_dtype(DType::F64)?,
                flow(k, k + 2)?.tensor().to_dtype(DType::F64)?,
                flow(k + 2, k)?.tensor().to_dtype(DType::F64)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(flow_trajectory_penalty(&triples, mode, aggregation)?.to_scalar::<f64>()?)
}

/// Trajectory penalty of a swapped clip under a flow estimator.
pub fn flow_trajectory_loss(
    frames: &[Image],
    flow: &dyn FlowEstimator,
    mode: FlowMode,
    aggregation: FtAggregation,
) -> Result<f64> {
    flow_trajectory_loss_with(frames.len(), |i, j| flow.flow(&frames[i], &frames[j]), mode, aggregation)
}
