//! Evaluation metrics: identity similarity and retrieval, attribute error,
//! and the Fréchet distance between Gaussian feature fits.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::nets::Image;
use crate::perception::AttributeEstimator;

/// Eigenvalues of the covariance product below this are a numerical error;
/// values in `[-tol, 0]` are clamped to zero.
pub const PSD_TOLERANCE: f64 = 1e-8;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("vector lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Fraction of swapped embeddings whose most similar source embedding is
/// their own source. A tie for the maximum counts as a miss.
pub fn id_retrieval_rate(swapped: &[Vec<f64>], sources: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if swapped.is_empty() || sources.is_empty() {
        return Err(Error::InvalidArgument("id_retrieval_rate on empty lists".into()));
    }
    if swapped.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} swapped embeddings with {} labels",
            swapped.len(),
            labels.len()
        )));
    }
    let mut hits = 0usize;
    for (query, &label) in swapped.iter().zip(labels) {
        if label >= sources.len() {
            return Err(Error::InvalidArgument(format!("label {label} outside the {} sources", sources.len())));
        }
        let sims = sources.iter().map(|s| cosine_similarity(query, s)).collect::<Result<Vec<_>>>()?;
        let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let winners = sims.iter().filter(|&&s| s == best).count();
        if winners == 1 && sims[label] == best {
            hits += 1;
        }
    }
    Ok(hits as f64 / swapped.len() as f64)
}

/// Mean Euclidean distance between estimator features of paired images.
pub fn attribute_error(swapped: &[Image], targets: &[Image], estimate: &dyn AttributeEstimator) -> Result<f64> {
    if swapped.len() != targets.len() || swapped.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "attribute_error needs equal nonempty lists, got {} and {}",
            swapped.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (y, x) in swapped.iter().zip(targets) {
        let (fy, fx) = (estimate.features(y)?, estimate.features(x)?);
        if fy.len() != fx.len() {
            return Err(Error::Contract("attribute estimator changed output length".into()));
        }
        total += fy.iter().zip(&fx).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    }
    Ok(total / swapped.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sample mean and unbiased (`n - 1`) covariance, symmetrized.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InsufficientSamples(n));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::InvalidArgument("feature vectors must share a nonzero length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov })
}

/// PSD square root of a symmetric matrix by eigendecomposition.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -PSD_TOLERANCE {
            return Err(Error::Numerical(format!("matrix not positive semidefinite (eigenvalue {v:e})")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `Tr((S_x^(1/2) S_y S_x^(1/2))^(1/2))`.
fn root_product_trace(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    let root = sqrt_psd(x)?;
    let inner = &root * y * &root;
    let inner = (&inner + inner.transpose()) * 0.5;
    let mut trace = 0.0;
    for v in SymmetricEigen::new(inner).eigenvalues.iter() {
        if *v < -PSD_TOLERANCE {
            return Err(Error::Numerical(format!("covariance product has eigenvalue {v:e}")));
        }
        trace += v.max(0.0).sqrt();
    }
    Ok(trace)
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The cross trace is the mean of the two equivalent orderings, which makes
/// the result exactly symmetric even when near-singular covariances leave
/// rounding noise in the square roots.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() || a.cov.shape() != b.cov.shape() {
        return Err(Error::InvalidArgument("Gaussian statistics differ in dimension".into()));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let cross = 0.5 * (root_product_trace(&a.cov, &b.cov)? + root_product_trace(&b.cov, &a.cov)?);
    Ok((mean_term + (a.cov.trace() + b.cov.trace()) - 2.0 * cross).max(0.0))
}

/// Fréchet distance between feature fits of two image sets.
pub fn fid<F>(images_a: &[Image], images_b: &[Image], extract: F) -> Result<f64>
where
    F: Fn(&Image) -> Result<Vec<f64>>,
{
    let fa = images_a.iter().map(&extract).collect::<Result<Vec<_>>>()?;
    let fb = images_b.iter().map(&extract).collect::<Result<Vec<_>>>()?;
    frechet_distance(&gaussian_stats(&fa)?, &gaussian_stats(&fb)?)
}

/// Peak signal-to-noise ratio for images in `[-1, 1]` (peak-to-peak range 2).
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument("psnr needs equal nonempty inputs".into()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(10.0 * (4.0 / mse).log10())
}
