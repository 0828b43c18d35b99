//! Training objectives and their weighted combination.
//!
//! Images are batched `(B, 3, R, R)` tensors. Every squared-norm term is an
//! element mean (MSE).

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::blending::FaceMask;
use crate::error::{Error, Result};
use crate::perception::{IdentityEmbedder, LandmarkEstimator, PerceptualExtractor};

pub const LOG_EPS: f64 = 1e-8;

fn nonempty(t: &Tensor, what: &str) -> Result<()> {
    if t.elem_count() == 0 {
        return Err(Error::InvalidArgument(format!("{what}: empty batch")));
    }
    Ok(())
}

/// `mean(-log(max(p, eps)))`. Scores are only floored: -log 1 is already
/// finite, and a ceiling would make a perfect score cost `eps`.
fn mean_neg_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(LOG_EPS, 1.0)?.log()?.neg()?.mean_all()?)
}

/// Non-saturating generator loss `mean(-log D(y_f))`.
pub fn adversarial_generator_loss(scores: &Tensor) -> Result<Tensor> {
    nonempty(scores, "adversarial_generator_loss")?;
    mean_neg_log(scores)
}

/// `mean(-log(1 - D(fake))) + mean(-log D(real))`.
pub fn discriminator_loss(fake_scores: &Tensor, real_scores: &Tensor) -> Result<Tensor> {
    nonempty(fake_scores, "discriminator_loss")?;
    nonempty(real_scores, "discriminator_loss")?;
    let fake = mean_neg_log(&fake_scores.affine(-1.0, 1.0)?)?;
    Ok((fake + mean_neg_log(real_scores)?)?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape("mse", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Per-sample MSE over all non-batch dimensions, `(B,)`.
fn mse_per_sample(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape("mse", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let n = a.dim(0)?;
    Ok((a - b)?.sqr()?.reshape((n, ()))?.mean(1)?)
}

/// Rows of `(B, E)` divided by their norms; a zero row is an error.
fn normalize_rows(e: &Tensor) -> Result<Tensor> {
    let norms = e.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let values = norms.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if values.iter().any(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::DegenerateEmbedding("identity embedding has zero norm".into()));
    }
    Ok(e.broadcast_div(&norms)?)
}

/// Cosine similarity of matching rows, `(B,)`.
pub fn row_cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((normalize_rows(a)? * normalize_rows(b)?)?.sum(D::Minus1)?)
}

/// `mean_b(1 - cos(embed(y_f), embed(x_s)))`.
pub fn identity_loss(y_f: &Tensor, x_s: &Tensor, embed: &dyn IdentityEmbedder) -> Result<Tensor> {
    let cos = row_cosine(&embed.embed(y_f)?, &embed.embed(x_s)?)?;
    Ok(cos.affine(-1.0, 1.0)?.mean_all()?)
}

/// `MSE(est(y_s), est(x_t)) + MSE(est(y_f), est(x_t))`.
pub fn landmark_alignment_loss(
    y_s: &Tensor,
    y_f: &Tensor,
    x_t: &Tensor,
    estimate: &dyn LandmarkEstimator,
) -> Result<Tensor> {
    let (e_s, e_f, e_t) = (estimate.estimate(y_s)?, estimate.estimate(y_f)?, estimate.estimate(x_t)?);
    if e_s.dims() != e_t.dims() || e_f.dims() != e_t.dims() {
        return Err(Error::Contract(format!(
            "landmark estimator returned inconsistent shapes {:?}, {:?}, {:?}",
            e_s.dims(),
            e_f.dims(),
            e_t.dims()
        )));
    }
    Ok((mse(&e_s, &e_t)? + mse(&e_f, &e_t)?)?)
}

/// Pixel plus perceptual reconstruction of the target, applied only to
/// samples whose source and target share identity. The result is the batch
/// mean of the per-sample losses, zeros included.
pub fn reconstruction_loss(
    y_s: &Tensor,
    y_f: &Tensor,
    x_t: &Tensor,
    same_identity: &[bool],
    alpha: f64,
    perceptual: &dyn PerceptualExtractor,
) -> Result<Tensor> {
    let b = x_t.dim(0)?;
    if same_identity.len() != b {
        return Err(Error::InvalidArgument(format!(
            "reconstruction_loss: {} identity flags for batch of {b}",
            same_identity.len()
        )));
    }
    if !same_identity.iter().any(|&s| s) {
        return Ok(Tensor::zeros((), x_t.dtype(), x_t.device())?);
    }
    let f_t = perceptual.features(x_t)?;
    let term = |y: &Tensor| -> Result<Tensor> {
        let pix = mse_per_sample(y, x_t)?;
        let feat = mse_per_sample(&perceptual.features(y)?, &f_t)?;
        Ok((pix + feat.affine(alpha, 0.0)?)?)
    };
    let per_sample = (term(y_f)? + term(y_s)?)?;
    let flags: Vec<f64> = same_identity.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    let flags = Tensor::from_vec(flags, b, x_t.device())?.to_dtype(x_t.dtype())?;
    Ok((per_sample * flags)?.mean_all()?)
}

/// Which pixels take part in histogram mapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HmScope {
    #[default]
    Mask,
    Global,
}

impl std::str::FromStr for HmScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(Self::Mask),
            "global" => Ok(Self::Global),
            other => Err(Error::InvalidConfig(format!("hm_scope must be mask or global, got `{other}`"))),
        }
    }
}

/// Monotone quantile matching of `values` onto the distribution of
/// `reference`.
///
/// The element of (tie-averaged) rank `r` among `n` values maps to quantile
/// `r / (n - 1)` of the sorted reference, linearly interpolated between order
/// statistics. A single value maps to the median.
pub fn quantile_match(values: &[f64], reference: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 0 || reference.is_empty() {
        return values.to_vec();
    }
    let mut sorted_ref = reference.to_vec();
    sorted_ref.sort_by(f64::total_cmp);
    // position = rank * (m - 1) / (n - 1), formed so that equal sizes give
    // exact integer positions
    let at_position = |pos: f64| {
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(sorted_ref.len() - 1);
        let frac = pos - lo as f64;
        if frac == 0.0 {
            sorted_ref[lo]
        } else {
            sorted_ref[lo] + frac * (sorted_ref[hi] - sorted_ref[lo])
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end) as f64 / 2.0;
        let m1 = (sorted_ref.len() - 1) as f64;
        let pos = if n == 1 { 0.5 * m1 } else { rank * m1 / (n - 1) as f64 };
        let mapped = at_position(pos);
        for &i in &order[start..=end] {
            out[i] = mapped;
        }
        start = end + 1;
    }
    out
}

/// Histogram-mapped guidance for one `(3, R, R)` image given as flat CHW
/// values. Returns the mapped values and whether the mask was empty.
pub fn histogram_map_values(y: &[f64], reference: &[f64], mask: &FaceMask, scope: HmScope) -> Result<(Vec<f64>, bool)> {
    let plane = mask.side() * mask.side();
    if y.len() != 3 * plane || reference.len() != 3 * plane {
        return Err(Error::shape(
            "histogram_map",
            format!("images of {} / {} values vs mask side {}", y.len(), reference.len(), mask.side()),
        ));
    }
    let inside: Vec<usize> = match scope {
        HmScope::Global => (0..plane).collect(),
        HmScope::Mask => (0..plane).filter(|&p| mask.values()[p] >= 0.5).collect(),
    };
    if inside.is_empty() {
        return Ok((y.to_vec(), true));
    }
    let mut out = y.to_vec();
    for c in 0..3 {
        let base = c * plane;
        let ys: Vec<f64> = inside.iter().map(|&p| y[base + p]).collect();
        let rs: Vec<f64> = inside.iter().map(|&p| reference[base + p]).collect();
        for (&p, v) in inside.iter().zip(quantile_match(&ys, &rs)) {
            out[base + p] = v;
        }
    }
    Ok((out, false))
}

/// Batched histogram mapping; the result is detached from the graph.
/// `masks` holds one mask per sample.
pub fn histogram_map(y: &Tensor, reference: &Tensor, masks: &[FaceMask], scope: HmScope) -> Result<Tensor> {
    let (b, c, h, w) = y.dims4()?;
    if reference.dims() != y.dims() || c != 3 || h != w || masks.len() != b {
        return Err(Error::shape(
            "histogram_map",
            format!("y {:?}, ref {:?}, {} masks", y.dims(), reference.dims(), masks.len()),
        ));
    }
    let yv = y.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let rv = reference.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let n = 3 * h * w;
    let mut out = Vec::with_capacity(yv.len());
    for (i, mask) in masks.iter().enumerate() {
        let (mapped, empty) = histogram_map_values(&yv[i * n..(i + 1) * n], &rv[i * n..(i + 1) * n], mask, scope)?;
        if empty {
            log::warn!("histogram_map: empty mask for sample {i}, guidance equals input");
        }
        out.extend(mapped);
    }
    Ok(Tensor::from_vec(out, y.dims(), y.device())?.to_dtype(y.dtype())?)
}

/// `MSE(y_f, hm(y_f, x_t))` with the guidance treated as a constant.
pub fn style_transfer_loss(y_f: &Tensor, x_t: &Tensor, masks: &[FaceMask], scope: HmScope) -> Result<Tensor> {
    let guide = histogram_map(y_f, x_t, masks, scope)?;
    mse(y_f, &guide)
}

/// Weights of the five generator objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adv: f64,
    pub id: f64,
    pub lmk: f64,
    pub rec: f64,
    pub st: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            id: 2.0,
            lmk: 0.1,
            rec: 2.0,
            st: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [("adv", self.adv), ("id", self.id), ("lmk", self.lmk), ("rec", self.rec), ("st", self.st)]
    }
}

/// Scalar values of one generator step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub adv: f64,
    pub id: f64,
    pub lmk: f64,
    pub rec: f64,
    pub st: f64,
    pub total: f64,
}

/// `λ1·adv + λ2·id + λ3·lmk + λ4·rec + λ5·st`; a NaN component is reported by name.
pub fn total_loss(components: [f64; 5], w: &LossWeights) -> Result<f64> {
    let names = ["adv", "id", "lmk", "rec", "st"];
    for (name, v) in names.iter().zip(components) {
        if v.is_nan() {
            return Err(Error::PoisonedLoss { component: name });
        }
    }
    let [adv, id, lmk, rec, st] = components;
    Ok(w.adv * adv + w.id * id + w.lmk * lmk + w.rec * rec + w.st * st)
}

/// Differentiable loss terms of one generator step.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub adv: Tensor,
    pub id: Tensor,
    pub lmk: Tensor,
    pub rec: Tensor,
    pub st: Tensor,
}

impl LossTerms {
    /// Weighted graph total plus the scalar bundle, whose `total` is
    /// recomputed in f64 from the component scalars.
    pub fn combine(&self, w: &LossWeights) -> Result<(Tensor, LossBundle)> {
        let terms = [&self.adv, &self.id, &self.lmk, &self.rec, &self.st];
        let mut values = [0.0; 5];
        for (v, t) in values.iter_mut().zip(terms) {
            *v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
        let total = total_loss(values, w)?;
        let weights = [w.adv, w.id, w.lmk, w.rec, w.st];
        let mut graph: Option<Tensor> = None;
        for (t, &lambda) in terms.iter().zip(&weights) {
            if lambda == 0.0 {
                continue;
            }
            let scaled = t.affine(lambda, 0.0)?;
            graph = Some(match graph {
                None => scaled,
                Some(g) => (g + scaled)?,
            });
        }
        let graph = match graph {
            Some(g) => g,
            None => self.adv.zeros_like()?,
        };
        let [adv, id, lmk, rec, st] = values;
        Ok((graph, LossBundle { adv, id, lmk, rec, st, total }))
    }
}

/// Stochastic estimate of the squared input-gradient norm of a scalar-per-
/// sample function, `mean_b ((f(x + h u) - f(x - h u)) / 2h)^2` with
/// `u ~ N(0, I)`. Its expectation over `u` is `mean_b |grad f|^2` up to
/// `O(h^2)`, and it only needs first-order backprop.
pub fn gradient_penalty_estimate<F>(f: F, x: &Tensor, h: f64, seed: u64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    use rand::SeedableRng;
    use rand_distr::Distribution;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f64> = (0..x.elem_count()).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
    let u = Tensor::from_vec(u, x.dims(), x.device())?.to_dtype(x.dtype())?;
    let x = x.detach();
    let plus = f(&(&x + u.affine(h, 0.0)?)?)?;
    let minus = f(&(&x - u.affine(h, 0.0)?)?)?;
    Ok(((plus - minus)?.affine(0.5 / h, 0.0)?).sqr()?.mean_all()?)
}
