//! Batch evaluation of a trained model over a list of swap pairs.
//!
//! The pair manifest is JSON:
//!
//! ```json
//! {"pairs": [{"source": "a.png", "target": "b.png", "mask": "b.mask.png",
//!             "source_landmarks": "a.landmarks.json",
//!             "target_landmarks": "b.landmarks.json"}]}
//! ```
//!
//! Relative paths resolve against the manifest's directory. Every distinct
//! source path is one gallery identity for retrieval.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::io::{load_image, load_landmarks, load_mask};
use super::models::{swap_image, Models};
use crate::error::{Error, Result};
use crate::metrics::{attribute_error, cosine_similarity, fid, id_retrieval_rate};
use crate::nets::Image;
use crate::perception::{IdentityEmbedder, ProviderSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPair {
    pub source: PathBuf,
    pub target: PathBuf,
    pub mask: PathBuf,
    pub source_landmarks: PathBuf,
    pub target_landmarks: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairManifest {
    pub pairs: Vec<EvalPair>,
}

impl PairManifest {
    /// Reads a manifest and makes its paths absolute relative to its folder.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut m.pairs {
            for f in [
                &mut p.source,
                &mut p.target,
                &mut p.mask,
                &mut p.source_landmarks,
                &mut p.target_landmarks,
            ] {
                if f.is_relative() {
                    *f = base.join(&*f);
                }
            }
        }
        if m.pairs.is_empty() {
            return Err(Error::format(path, "manifest lists no pairs"));
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean cosine similarity between swapped and source identity embeddings.
    pub id_similarity: f64,
    pub id_retrieval: f64,
    pub pose_error: f64,
    pub expression_error: f64,
    /// Fréchet distance between identity-embedder features of the targets and
    /// of the swapped faces.
    pub fid: f64,
}

fn embed(embedder: &dyn IdentityEmbedder, img: &Image) -> Result<Vec<f64>> {
    Ok(embedder
        .embed(&img.tensor().unsqueeze(0)?)?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?)
}

pub fn evaluate(models: &Models, providers: &ProviderSet, manifest: &PairManifest) -> Result<EvalReport> {
    let r = models.resolution();
    let (dtype, device) = (models.dtype(), models.device().clone());
    let mut gallery_paths: Vec<&PathBuf> = Vec::new();
    let mut gallery = Vec::new();
    let mut labels = Vec::new();
    let mut swapped = Vec::new();
    let mut targets = Vec::new();
    let mut similarity = 0.0;
    for pair in &manifest.pairs {
        let x_s = load_image(&pair.source, r, dtype, &device)?;
        let x_t = load_image(&pair.target, r, dtype, &device)?;
        let mask = load_mask(&pair.mask, r)?;
        let l_s = load_landmarks(&pair.source_landmarks)?;
        let l_t = load_landmarks(&pair.target_landmarks)?;
        let y = swap_image(models, &x_s, &x_t, &mask, &l_s, &l_t)?.final_image;
        let e_s = embed(providers.identity.as_ref(), &x_s)?;
        let e_y = embed(providers.identity.as_ref(), &y)?;
        similarity += cosine_similarity(&e_y, &e_s)?;
        let label = match gallery_paths.iter().position(|p| **p == pair.source) {
            Some(i) => i,
            None => {
                gallery_paths.push(&pair.source);
                gallery.push(e_s);
                gallery.len() - 1
            }
        };
        labels.push(label);
        swapped.push(y);
        targets.push(x_t);
    }
    let queries = swapped
        .iter()
        .map(|y| embed(providers.identity.as_ref(), y))
        .collect::<Result<Vec<_>>>()?;
    let fid_value = if swapped.len() >= 2 {
        fid(&targets, &swapped, |img| embed(providers.identity.as_ref(), img))?
    } else {
        log::warn!("FID needs at least two pairs; reporting NaN");
        f64::NAN
    };
    Ok(EvalReport {
        id_similarity: similarity / manifest.pairs.len() as f64,
        id_retrieval: id_retrieval_rate(&queries, &gallery, &labels)?,
        pose_error: attribute_error(&swapped, &targets, providers.pose.as_ref())?,
        expression_error: attribute_error(&swapped, &targets, providers.expression.as_ref())?,
        fid: fid_value,
    })
}
