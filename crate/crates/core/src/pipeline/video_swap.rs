//! Swapping a source face into every frame of a target clip.

use candle_core::{DType, Tensor, Var};

use super::config::{VideoConfig, VideoMode};
use super::models::{swap_image, Models};
use crate::blending::FaceMask;
use crate::error::{Error, Result};
use crate::latent::{apply_transfer_direction, AppearanceCode, StructureCode};
use crate::losses::{identity_loss, landmark_alignment_loss};
use crate::nets::{Image, LandmarkSet};
use crate::perception::{LandmarkEstimator, ProviderSet};
use crate::video::{code_trajectory_loss_stacked, flow_trajectory_loss, FrameSequence};

/// Output of [`swap_video`].
#[derive(Debug)]
pub struct VideoSwap {
    pub frames: FrameSequence,
    /// Combined objective before the first step and after every accepted step
    /// (temporal mode only).
    pub objective: Vec<f64>,
}

/// Reads `(1, 2N)` interleaved estimator output back into a landmark set.
pub fn estimate_landmarks(estimator: &dyn LandmarkEstimator, image: &Image) -> Result<LandmarkSet> {
    let flat = estimator
        .estimate(&image.tensor().unsqueeze(0)?)?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    LandmarkSet::new(flat.chunks_exact(2).map(|p| [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]).collect())
}

struct FrameInputs {
    x_t: Tensor,
    mask: FaceMask,
    landmarks: LandmarkSet,
}

fn frame_inputs(
    models: &Models,
    targets: &FrameSequence,
    fallback: Option<&dyn LandmarkEstimator>,
) -> Result<Vec<FrameInputs>> {
    let r = models.resolution();
    (0..targets.len())
        .map(|k| {
            let frame = &targets.frames()[k];
            if frame.resolution() != r {
                return Err(Error::shape(
                    "swap_video",
                    format!("frame {k} is {}px, models expect {r}px", frame.resolution()),
                ));
            }
            let mask = targets
                .masks()
                .map(|m| m[k].clone())
                .ok_or_else(|| Error::InvalidConfig(format!("frame {k} has no face mask")))?;
            let landmarks = match (targets.landmarks(), fallback) {
                (Some(l), _) => l[k].clone(),
                (None, Some(est)) => estimate_landmarks(est, frame)?,
                (None, None) => {
                    return Err(Error::InvalidConfig(format!(
                        "frame {k} has no landmarks and no landmark estimator was given"
                    )))
                }
            };
            let x_t = frame.to_dtype(models.dtype())?.tensor().unsqueeze(0)?;
            Ok(FrameInputs { x_t, mask, landmarks })
        })
        .collect()
}

/// Swaps `x_s` into every frame of `targets`.
///
/// Target frames need masks. Landmarks come from the sequence, or from
/// `providers.landmarks` when `estimate_missing_landmarks` is set.
pub fn swap_video(
    models: &Models,
    providers: &ProviderSet,
    x_s: &Image,
    source_landmarks: &LandmarkSet,
    targets: &FrameSequence,
    config: &VideoConfig,
    estimate_missing_landmarks: bool,
) -> Result<VideoSwap> {
    config.validate()?;
    let fallback = estimate_missing_landmarks.then(|| providers.landmarks.as_ref());
    let inputs = frame_inputs(models, targets, fallback)?;
    if config.mode == VideoMode::Independent || inputs.len() < 2 {
        let frames = inputs
            .iter()
            .map(|f| {
                let x_t = Image::new(f.x_t.get(0)?)?;
                Ok(swap_image(models, x_s, &x_t, &f.mask, source_landmarks, &f.landmarks)?.final_image)
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(VideoSwap {
            frames: FrameSequence::new(frames)?,
            objective: Vec::new(),
        });
    }
    temporal(models, providers, x_s, source_landmarks, &inputs, config)
}

struct Prepared {
    g_t: Tensor,
    g_hat: Tensor,
    appearance: Vec<AppearanceCode>,
}

fn temporal(
    models: &Models,
    providers: &ProviderSet,
    x_s: &Image,
    l_s: &LandmarkSet,
    inputs: &[FrameInputs],
    config: &VideoConfig,
) -> Result<VideoSwap> {
    let x_s = x_s.to_dtype(models.dtype())?.tensor().unsqueeze(0)?;
    let mut g_t = Vec::new();
    let mut g_hat = Vec::new();
    let mut appearance = Vec::new();
    for f in inputs {
        let p = models.prepare(&x_s, &f.x_t, std::slice::from_ref(l_s), std::slice::from_ref(&f.landmarks))?;
        g_hat.push(apply_transfer_direction(&p.g_s, &p.direction)?.tensor().detach());
        g_t.push(p.g_t.tensor().detach());
        appearance.push(p.appearance);
    }
    let prepared = Prepared {
        g_t: Tensor::cat(&g_t, 0)?,
        g_hat: Tensor::cat(&g_hat, 0)?,
        appearance,
    };
    let codes = Var::from_tensor(&prepared.g_hat)?;
    let objective = |g: &Tensor| -> Result<(Tensor, f64, Vec<Tensor>)> {
        let mut graph = g.zeros_like()?.sum_all()?;
        if config.lambda_ct > 0.0 {
            let ct = code_trajectory_loss_stacked(g, &prepared.g_t)?;
            graph = (graph + ct.affine(config.lambda_ct, 0.0)?)?;
        }
        let mut finals = Vec::with_capacity(inputs.len());
        for (k, f) in inputs.iter().enumerate() {
            let code = StructureCode::from_graph(g.narrow(0, k, 1)?);
            let out = models.render(&code, &prepared.appearance[k], &f.x_t, std::slice::from_ref(&f.mask))?;
            if config.lambda_id > 0.0 {
                let id = identity_loss(&out.y_f, &x_s, providers.identity.as_ref())?;
                graph = (graph + id.affine(config.lambda_id / inputs.len() as f64, 0.0)?)?;
            }
            if config.lambda_lmk > 0.0 {
                let lmk = landmark_alignment_loss(&out.y_s, &out.y_f, &f.x_t, providers.landmarks.as_ref())?;
                graph = (graph + lmk.affine(config.lambda_lmk / inputs.len() as f64, 0.0)?)?;
            }
            finals.push(out.y_f.detach().get(0)?);
        }
        // the flow term only enters the value: the flow provider is not differentiable
        let ft = if config.lambda_ft > 0.0 && inputs.len() >= 3 {
            let frames = finals.iter().map(|t| Image::new(t.clone())).collect::<Result<Vec<_>>>()?;
            config.lambda_ft
                * flow_trajectory_loss(&frames, providers.flow.as_ref(), config.flow_mode, config.ft_aggregation)?
        } else {
            0.0
        };
        let value = graph.to_dtype(DType::F64)?.to_scalar::<f64>()? + ft;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("video objective became {value}")));
        }
        Ok((graph, value, finals))
    };

    let (mut graph, mut value, mut finals) = objective(codes.as_tensor())?;
    let mut history = vec![value];
    let mut lr = config.learning_rate;
    for step in 0..config.steps {
        let grads = graph.backward()?;
        let Some(grad) = grads.get(codes.as_tensor()).cloned() else {
            break;
        };
        let current = codes.as_tensor().copy()?;
        let mut accepted = false;
        // backtracking keeps the recorded objective non-increasing
        for _ in 0..12 {
            let trial = (&current - grad.affine(lr, 0.0)?)?;
            codes.set(&trial)?;
            let (g2, v2, f2) = objective(codes.as_tensor())?;
            if v2 <= value {
                (graph, value, finals) = (g2, v2, f2);
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            codes.set(&current)?;
            log::debug!("video optimization stalled at step {step}");
            break;
        }
        history.push(value);
    }
    let frames = finals.into_iter().map(Image::new).collect::<Result<Vec<_>>>()?;
    Ok(VideoSwap {
        frames: FrameSequence::new(frames)?,
        objective: history,
    })
}
