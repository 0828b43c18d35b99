use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width/resolution configuration shared by every network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub latent_width: usize,
    pub channel_cap: usize,
    pub channel_budget: usize,
    pub channel_scale: f64,
    /// Adds fixed seeded per-layer noise maps to generator activations.
    pub noise: bool,
    pub noise_seed: u64,
}

impl GeneratorConfig {
    /// Full-scale widths: 512 channels up to 64x64, halving above.
    pub fn full(resolution: usize) -> Self {
        Self {
            resolution,
            latent_width: 512,
            channel_cap: 512,
            channel_budget: 32768,
            channel_scale: 1.0,
            noise: false,
            noise_seed: 0,
        }
    }

    /// Desk-scale widths used by the toy pipeline and the tests.
    pub fn toy(resolution: usize) -> Self {
        Self {
            latent_width: 32,
            channel_scale: 1.0 / 64.0,
            ..Self::full(resolution)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || !(32..=1024).contains(&self.resolution) {
            return Err(Error::InvalidConfig(format!(
                "resolution must be a power of two in [32, 1024], got {}",
                self.resolution
            )));
        }
        if self.latent_width == 0 {
            return Err(Error::InvalidConfig("latent width must be positive".into()));
        }
        if !(self.channel_scale > 0.0 && self.channel_scale <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "channel_scale must lie in (0, 1], got {}",
                self.channel_scale
            )));
        }
        if self.channel_cap == 0 || self.channel_budget == 0 {
            return Err(Error::InvalidConfig("channel cap and budget must be positive".into()));
        }
        Ok(())
    }

    pub fn num_latent_vectors(&self) -> usize {
        2 * (log2(self.resolution) - 1)
    }

    /// Pyramid resolutions 8, 16, ..., resolution.
    pub fn pyramid_resolutions(&self) -> Vec<usize> {
        (3..=log2(self.resolution)).map(|p| 1usize << p).collect()
    }

    pub fn channels(&self, level_resolution: usize) -> usize {
        channel_width(level_resolution, self)
    }
}

fn log2(n: usize) -> usize {
    n.trailing_zeros() as usize
}

/// `L = 2 (log2 r - 1)`: two modulated layers per level from 4x4 up.
pub fn num_latent_vectors(resolution: usize) -> Result<usize> {
    if !resolution.is_power_of_two() || !(4..=1024).contains(&resolution) {
        return Err(Error::InvalidConfig(format!(
            "resolution must be a power of two in [4, 1024], got {resolution}"
        )));
    }
    Ok(2 * (log2(resolution) - 1))
}

/// `min(cap, budget / r) * scale`, rounded to the nearest multiple of 4, floor 4.
pub fn channel_width(level_resolution: usize, cfg: &GeneratorConfig) -> usize {
    let base = (cfg.channel_cap as f64).min(cfg.channel_budget as f64 / level_resolution as f64);
    let scaled = base * cfg.channel_scale;
    let rounded = (scaled / 4.0).round() as usize * 4;
    rounded.max(4)
}
