//! Face datasets on disk, the synthetic toy-face generator, and seeded batch
//! sampling.
//!
//! A dataset directory holds, per sample `<stem>`: `<stem>.png`,
//! `<stem>.landmarks.json` and `<stem>.mask.png`.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::{load_image, load_landmarks, load_mask, save_image, save_landmarks, save_mask};
use super::models::SwapBatch;
use crate::blending::FaceMask;
use crate::error::{Error, Result};
use crate::nets::{Image, LandmarkSet};

#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub image: Image,
    pub landmarks: LandmarkSet,
    pub mask: FaceMask,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Loads every `<stem>.png` that has both companion files, in name order.
    pub fn load(dir: &Path, resolution: usize) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut stems: Vec<String> = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if let Some(stem) = name.strip_suffix(".png") {
                if !stem.ends_with(".mask") {
                    stems.push(stem.to_string());
                }
            }
        }
        stems.sort();
        let mut samples = Vec::with_capacity(stems.len());
        for stem in stems {
            let lp = dir.join(format!("{stem}.landmarks.json"));
            let mp = dir.join(format!("{stem}.mask.png"));
            if !lp.exists() || !mp.exists() {
                log::warn!("skipping {stem}: missing landmarks or mask");
                continue;
            }
            samples.push(Sample {
                image: load_image(&dir.join(format!("{stem}.png")), resolution, DType::F32, &Device::Cpu)?,
                landmarks: load_landmarks(&lp)?,
                mask: load_mask(&mp, resolution)?,
                name: stem,
            });
        }
        if samples.is_empty() {
            return Err(Error::format(dir, "no samples (<stem>.png with .landmarks.json and .mask.png)"));
        }
        Ok(Self { samples })
    }
}

/// Files written for one sample.
pub fn sample_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{stem}.png")),
        dir.join(format!("{stem}.landmarks.json")),
        dir.join(format!("{stem}.mask.png")),
    )
}

struct FaceParams {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    skin: [f64; 3],
    hair: [f64; 3],
    bg_top: [f64; 3],
    bg_bottom: [f64; 3],
    eye_dy: f64,
    eye_dx: f64,
    mouth_w: f64,
    mouth_open: f64,
}

fn ellipse_points(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|i| {
            let t = if n == 1 { from } else { from + (to - from) * i as f64 / (n - 1) as f64 };
            [cx + rx * t.cos(), cy + ry * t.sin()]
        })
        .collect()
}

/// The 68-point layout: jaw 17, brows 5+5, nose 4+5, eyes 6+6, mouth 12+8.
fn face_landmarks(p: &FaceParams) -> Vec<[f64; 2]> {
    let mut pts = ellipse_points(p.cx, p.cy, p.rx, p.ry, PI, 0.0, 17);
    let (ex_l, ex_r, ey) = (p.cx - p.eye_dx, p.cx + p.eye_dx, p.cy - p.eye_dy);
    for ex in [ex_l, ex_r] {
        pts.extend(ellipse_points(ex, ey - 0.05, 0.06, 0.02, 1.1 * PI, 1.9 * PI, 5));
    }
    for i in 0..4 {
        pts.push([p.cx, ey + 0.02 + 0.025 * i as f64]);
    }
    pts.extend(ellipse_points(p.cx, ey + 0.1, 0.04, 0.015, 0.8 * PI, 0.2 * PI, 5));
    for ex in [ex_l, ex_r] {
        pts.extend(ellipse_points(ex, ey, 0.045, 0.02, PI, 3.0 * PI, 7).into_iter().take(6));
    }
    let my = p.cy + 0.17;
    pts.extend(ellipse_points(p.cx, my, p.mouth_w, 0.03 + p.mouth_open, PI, 3.0 * PI, 13).into_iter().take(12));
    pts.extend(ellipse_points(p.cx, my, 0.7 * p.mouth_w, 0.01 + p.mouth_open, PI, 3.0 * PI, 9).into_iter().take(8));
    pts.iter().map(|&[x, y]| [x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)]).collect()
}

fn inside(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let (u, v) = ((x - cx) / rx, (y - cy) / ry);
    u * u + v * v <= 1.0
}

/// Synthetic face: gradient background, skin ellipse with hair, eyes and a
/// mouth, its 68 landmarks and an inner-face mask. Images are f32.
pub fn toy_face(seed: u64, resolution: usize) -> Result<(Image, LandmarkSet, FaceMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xface);
    let mut color = |lo: f64, hi: f64| -> [f64; 3] { [0, 1, 2].map(|_| rng.gen_range(lo..hi)) };
    let skin_base = color(0.1, 0.7);
    let p = FaceParams {
        skin: [skin_base[0] + 0.2, skin_base[1], skin_base[2] - 0.2],
        hair: color(-0.95, -0.2),
        bg_top: color(-0.8, 0.8),
        bg_bottom: color(-0.8, 0.8),
        cx: rng.gen_range(0.45..0.55),
        cy: rng.gen_range(0.47..0.55),
        rx: rng.gen_range(0.25..0.31),
        ry: rng.gen_range(0.32..0.38),
        eye_dy: rng.gen_range(0.06..0.1),
        eye_dx: rng.gen_range(0.09..0.12),
        mouth_w: rng.gen_range(0.06..0.1),
        mouth_open: rng.gen_range(0.0..0.02),
    };
    let side = resolution;
    let plane = side * side;
    let mut data = vec![0.0; 3 * plane];
    let ey = p.cy - p.eye_dy;
    let my = p.cy + 0.17;
    for py in 0..side {
        for px in 0..side {
            let (x, y) = ((px as f64 + 0.5) / side as f64, (py as f64 + 0.5) / side as f64);
            let mut c: [f64; 3] = [0, 1, 2].map(|k| p.bg_top[k] * (1.0 - y) + p.bg_bottom[k] * y);
            if inside(x, y, p.cx, p.cy - 0.04, p.rx * 1.1, p.ry * 1.05) && y < p.cy - 0.1 {
                c = p.hair;
            }
            if inside(x, y, p.cx, p.cy, p.rx, p.ry) {
                let shade = 1.0 - 0.25 * ((x - p.cx) / p.rx).powi(2);
                c = p.skin.map(|v| v * shade);
                if y < p.cy - p.ry * 0.6 {
                    c = p.hair;
                }
            }
            for ex in [p.cx - p.eye_dx, p.cx + p.eye_dx] {
                if inside(x, y, ex, ey, 0.045, 0.02) {
                    c = [0.9, 0.9, 0.9];
                }
                if inside(x, y, ex, ey, 0.018, 0.018) {
                    c = [-0.8, -0.7, -0.6];
                }
                if inside(x, y, ex, ey - 0.05, 0.06, 0.012) {
                    c = p.hair;
                }
            }
            if inside(x, y, p.cx, ey + 0.08, 0.015, 0.05) {
                c = p.skin.map(|v| v * 0.8);
            }
            if inside(x, y, p.cx, my, p.mouth_w, 0.03 + p.mouth_open) {
                c = [0.6, -0.5, -0.4];
            }
            for k in 0..3 {
                data[k * plane + py * side + px] = c[k].clamp(-1.0, 1.0);
            }
        }
    }
    let image = Image::from_chw(data, side, DType::F32, &Device::Cpu)?;
    let landmarks = LandmarkSet::new(face_landmarks(&p))?;
    let mask = FaceMask::ellipse(side, p.cx, p.cy + 0.03, p.rx * 0.85, p.ry * 0.8);
    Ok((image, landmarks, mask))
}

pub fn toy_dataset(count: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    let samples = (0..count)
        .map(|i| {
            let (image, landmarks, mask) = toy_face(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), resolution)?;
            Ok(Sample {
                name: format!("face_{i:04}"),
                image,
                landmarks,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(samples))
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &dataset.samples {
        let (ip, lp, mp) = sample_paths(dir, &s.name);
        save_image(&s.image, &ip)?;
        save_landmarks(&s.landmarks, &lp)?;
        save_mask(&s.mask, &mp)?;
    }
    Ok(())
}

/// Draws `batch_size` pairs. With probability `p_same` a pair is `(x, x)`;
/// otherwise the two samples are distinct.
pub fn sample_batch(dataset: &Dataset, p_same: f64, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<SwapBatch> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot sample from an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut pairs = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let s = rng.gen_range(0..n);
        let same = rng.gen::<f64>() < p_same;
        if same {
            pairs.push((s, s, true));
        } else {
            if n < 2 {
                return Err(Error::InvalidArgument(
                    "distinct pairs need at least 2 samples (set p_same = 1 for a single image)".into(),
                ));
            }
            let mut t = rng.gen_range(0..n - 1);
            if t >= s {
                t += 1;
            }
            pairs.push((s, t, false));
        }
    }
    let stack = |idx: &dyn Fn(&(usize, usize, bool)) -> usize| -> Result<Tensor> {
        let imgs: Vec<Image> = pairs.iter().map(|p| dataset.samples[idx(p)].image.clone()).collect();
        Image::stack(&imgs)
    };
    Ok(SwapBatch {
        x_s: stack(&|p| p.0)?,
        x_t: stack(&|p| p.1)?,
        masks: pairs.iter().map(|p| dataset.samples[p.1].mask.clone()).collect(),
        l_s: pairs.iter().map(|p| dataset.samples[p.0].landmarks.clone()).collect(),
        l_t: pairs.iter().map(|p| dataset.samples[p.1].landmarks.clone()).collect(),
        same: pairs.iter().map(|p| p.2).collect(),
    })
}
