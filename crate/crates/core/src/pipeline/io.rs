//! PNG images and masks, JSON landmarks, and the frame-directory video layout.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use image::imageops::FilterType;
use image::{GrayImage, RgbImage};

use crate::blending::FaceMask;
use crate::error::{Error, Result};
use crate::nets::{Image, LandmarkSet};
use crate::video::FrameSequence;

/// 8-bit value to the internal `[-1, 1]` range.
pub fn byte_to_unit(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Internal value to 8 bits: `(v + 1) * 127.5`, rounded half up and clamped.
pub fn unit_to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
    }
    image::open(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Loads an RGB PNG, resizing (bilinear) to `resolution` if needed.
pub fn load_image(path: &Path, resolution: usize, dtype: DType, device: &Device) -> Result<Image> {
    let mut rgb = open(path)?.to_rgb8();
    let r = resolution as u32;
    if rgb.width() != r || rgb.height() != r {
        rgb = image::imageops::resize(&rgb, r, r, FilterType::Triangle);
    }
    let plane = resolution * resolution;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = byte_to_unit(px[c]);
        }
    }
    Image::from_chw(data, resolution, dtype, device)
}

pub fn image_to_rgb8(img: &Image) -> Result<RgbImage> {
    let side = img.resolution();
    let v = img.to_vec()?;
    let plane = side * side;
    Ok(RgbImage::from_fn(side as u32, side as u32, |x, y| {
        let p = y as usize * side + x as usize;
        image::Rgb([unit_to_byte(v[p]), unit_to_byte(v[plane + p]), unit_to_byte(v[2 * plane + p])])
    }))
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    image_to_rgb8(img)?
        .save(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Loads a grayscale mask; pixels `>= 128` are inside. Resized with nearest
/// neighbour if needed.
pub fn load_mask(path: &Path, resolution: usize) -> Result<FaceMask> {
    let mut luma = open(path)?.to_luma8();
    let r = resolution as u32;
    if luma.width() != r || luma.height() != r {
        luma = image::imageops::resize(&luma, r, r, FilterType::Nearest);
    }
    let values = luma.pixels().map(|p| if p[0] >= 128 { 1.0 } else { 0.0 }).collect();
    FaceMask::new(values, resolution)
}

pub fn save_mask(mask: &FaceMask, path: &Path) -> Result<()> {
    let side = mask.side() as u32;
    let img = GrayImage::from_fn(side, side, |x, y| {
        image::Luma([if mask.at(x as usize, y as usize) >= 0.5 { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// JSON array of `[x, y]` pairs in normalized coordinates.
pub fn load_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let points: Vec<[f64; 2]> = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    LandmarkSet::new(points).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_landmarks(landmarks: &LandmarkSet, path: &Path) -> Result<()> {
    let text = serde_json::to_string(landmarks.points()).expect("finite points serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:06}.png"))
}

pub fn frame_landmarks_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("landmarks_{index:06}.json"))
}

pub fn frame_mask_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("mask_{index:06}.png"))
}

/// Reads `frame_000000.png, frame_000001.png, ...` until the first gap, with
/// landmarks and masks attached when present for every frame.
pub fn load_frame_dir(dir: &Path, resolution: usize, dtype: DType, device: &Device) -> Result<FrameSequence> {
    let mut frames = Vec::new();
    while frame_path(dir, frames.len()).exists() {
        frames.push(load_image(&frame_path(dir, frames.len()), resolution, dtype, device)?);
    }
    if frames.is_empty() {
        return Err(Error::format(dir, "no frame_000000.png found"));
    }
    let n = frames.len();
    let mut seq = FrameSequence::new(frames)?;
    if let Some(i) = partial(n, |i| frame_landmarks_path(dir, i).exists()) {
        return Err(Error::InvalidConfig(format!(
            "frame {i} has no {}",
            frame_landmarks_path(dir, i).display()
        )));
    }
    if let Some(i) = partial(n, |i| frame_mask_path(dir, i).exists()) {
        return Err(Error::InvalidConfig(format!("frame {i} has no {}", frame_mask_path(dir, i).display())));
    }
    if (0..n).all(|i| frame_landmarks_path(dir, i).exists()) {
        let l = (0..n).map(|i| load_landmarks(&frame_landmarks_path(dir, i))).collect::<Result<Vec<_>>>()?;
        seq = seq.with_landmarks(l)?;
    }
    if (0..n).all(|i| frame_mask_path(dir, i).exists()) {
        let m = (0..n).map(|i| load_mask(&frame_mask_path(dir, i), resolution)).collect::<Result<Vec<_>>>()?;
        seq = seq.with_masks(m)?;
    }
    Ok(seq)
}

/// First missing index when some, but not all, frames have a file.
fn partial(n: usize, has: impl Fn(usize) -> bool) -> Option<usize> {
    let present: Vec<bool> = (0..n).map(has).collect();
    if present.iter().any(|&p| p) {
        present.iter().position(|&p| !p)
    } else {
        None
    }
}

pub fn save_frame_dir(seq: &FrameSequence, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in seq.frames().iter().enumerate() {
        save_image(f, &frame_path(dir, i))?;
    }
    if let Some(ls) = seq.landmarks() {
        for (i, l) in ls.iter().enumerate() {
            save_landmarks(l, &frame_landmarks_path(dir, i))?;
        }
    }
    if let Some(ms) = seq.masks() {
        for (i, m) in ms.iter().enumerate() {
            save_mask(m, &frame_mask_path(dir, i))?;
        }
    }
    Ok(())
}
