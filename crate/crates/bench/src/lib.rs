//! Seeded inputs shared by the benchmarks.

use candle_core::{DType, Device, Tensor};
use latentswap_core::latent::LatentCode;
use latentswap_core::nets::{GeneratorConfig, Image};
use latentswap_core::pipeline::config::Config;
use latentswap_core::pipeline::data::{toy_dataset, Dataset};
use latentswap_core::pipeline::train::TrainState;
use latentswap_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn image(resolution: usize, seed: u64) -> Result<Image> {
    Image::from_chw(uniform(3 * resolution * resolution, seed), resolution, DType::F32, &Device::Cpu)
}

pub fn latent_code(cfg: &GeneratorConfig, batch: usize, seed: u64) -> Result<LatentCode> {
    let (l, d) = (cfg.num_latent_vectors(), cfg.latent_width);
    let t = Tensor::from_vec(uniform(batch * l * d, seed), (batch, l, d), &Device::Cpu)?.to_dtype(DType::F32)?;
    LatentCode::new(t, l / 2)
}

pub fn features(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let flat = uniform(n * dim, seed);
    flat.chunks(dim).map(<[f64]>::to_vec).collect()
}

/// Training state and data at the given resolution with the toy model.
pub fn training_setup(resolution: usize, batch_size: usize) -> Result<(TrainState, Dataset)> {
    let mut cfg = Config::default();
    cfg.model.resolution = resolution;
    cfg.model.heatmap_grid = (resolution / 2).min(32);
    cfg.train.batch_size = batch_size;
    let state = TrainState::new(cfg)?;
    let data = toy_dataset(4, resolution, 1)?;
    Ok((state, data))
}
