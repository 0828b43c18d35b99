//! Quick invariant suite behind the `self-test` command. Every check runs on
//! tiny seeded instances and finishes in seconds.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{decode_checkpoint, encode_checkpoint};
use super::config::Config;
use super::data::{sample_batch, toy_dataset};
use super::train::{appearance_block_preserved, train_step, TrainState};
use crate::blending::{aggregate_level, FaceMask};
use crate::error::Result;
use crate::latent::{compose_swap_code, merge_code, split_code, LatentCode};
use crate::losses::{mse, quantile_match};
use crate::metrics::{frechet_distance, gaussian_stats, psnr};
use crate::perception::{AnalyticTranslationFlow, ProviderRegistry};
use crate::video::{code_trajectory_loss_stacked, flow_trajectory_loss_with, FlowMode, FtAggregation};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("latent split/merge round trip", latent_round_trip),
    ("mse matches direct sum", mse_oracle),
    ("quantile mapping is monotone", quantile_monotone),
    ("fid self-distance and symmetry", fid_sanity),
    ("trajectory losses on uniform translation", trajectory_values),
    ("feature blending extremes", blending_extremes),
    ("psnr reference value", psnr_value),
    ("training step keeps appearance rows", training_invariant),
    ("checkpoint round trip", checkpoint_round_trip),
];

/// Runs every check; a check that errors counts as failed.
pub fn run_self_test() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|(name, check)| {
            let (passed, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckOutcome { name, passed, detail }
        })
        .collect()
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5e1f)
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn latent_round_trip() -> Result<(bool, String)> {
    let mut r = rng();
    let w = LatentCode::new(Tensor::from_vec(random(&mut r, 10 * 8), (10, 8), &Device::Cpu)?, 4)?;
    let other = LatentCode::new(Tensor::from_vec(random(&mut r, 10 * 8), (10, 8), &Device::Cpu)?, 4)?;
    let (g, h) = split_code(&w)?;
    let back = merge_code(&g, &h)?;
    let same = back.to_rows()? == w.to_rows()?;
    let (_, h_t) = split_code(&other)?;
    let swapped = compose_swap_code(&g, &h_t)?;
    let keeps = swapped.to_rows()?[4..] == other.to_rows()?[4..];
    Ok((same && keeps, format!("merge identity {same}, appearance rows kept {keeps}")))
}

fn mse_oracle() -> Result<(bool, String)> {
    let mut r = rng();
    let (a, b) = (random(&mut r, 24), random(&mut r, 24));
    let want = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 24.0;
    let got = mse(
        &Tensor::from_vec(a, (2, 12), &Device::Cpu)?,
        &Tensor::from_vec(b, (2, 12), &Device::Cpu)?,
    )?
    .to_scalar::<f64>()?;
    Ok(((got - want).abs() <= 1e-12, format!("|diff| = {:e}", (got - want).abs())))
}

fn quantile_monotone() -> Result<(bool, String)> {
    let mut r = rng();
    for trial in 0..20 {
        let (v, reference) = (random(&mut r, 40), random(&mut r, 31));
        let mapped = quantile_match(&v, &reference);
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] < v[j] && mapped[i] > mapped[j] {
                    return Ok((false, format!("order broken in trial {trial}")));
                }
            }
        }
    }
    Ok((true, "20 random instances".into()))
}

fn fid_sanity() -> Result<(bool, String)> {
    let mut r = rng();
    let a: Vec<Vec<f64>> = (0..30).map(|_| random(&mut r, 4)).collect();
    let b: Vec<Vec<f64>> = (0..30).map(|_| random(&mut r, 4)).collect();
    let (sa, sb) = (gaussian_stats(&a)?, gaussian_stats(&b)?);
    let own = frechet_distance(&sa, &sa)?;
    let (ab, ba) = (frechet_distance(&sa, &sb)?, frechet_distance(&sb, &sa)?);
    let ok = own.abs() <= 1e-6 && (ab - ba).abs() <= 1e-8;
    Ok((ok, format!("self {own:e}, asymmetry {:e}", (ab - ba).abs())))
}

fn trajectory_values() -> Result<(bool, String)> {
    let flow = AnalyticTranslationFlow { velocity: (1.0, 0.0) };
    let f = |i, j| Ok(flow.between(i, j, 4, 4));
    let literal = flow_trajectory_loss_with(3, f, FlowMode::Literal, FtAggregation::Group)?;
    let midpoint = flow_trajectory_loss_with(3, f, FlowMode::Midpoint, FtAggregation::Group)?;
    let codes = Tensor::from_vec(random(&mut rng(), 3 * 2 * 3), (3, 2, 3), &Device::Cpu)?;
    let shifted = code_trajectory_loss_stacked(&codes.affine(1.0, 0.7)?, &codes)?.to_scalar::<f64>()?;
    let ok = (literal - 0.5f64.sqrt()).abs() <= 1e-9 && midpoint.abs() <= 1e-12 && shifted.abs() <= 1e-12;
    Ok((ok, format!("literal {literal}, midpoint {midpoint}, shifted codes {shifted:e}")))
}

fn blending_extremes() -> Result<(bool, String)> {
    let mut r = rng();
    let f_s = Tensor::from_vec(random(&mut r, 2 * 4 * 4), (1, 2, 4, 4), &Device::Cpu)?;
    let f_t = Tensor::from_vec(random(&mut r, 2 * 4 * 4), (1, 2, 4, 4), &Device::Cpu)?;
    let ones = FaceMask::batch(&[FaceMask::filled(4, true)], DType::F64, &Device::Cpu)?;
    let zeros = FaceMask::batch(&[FaceMask::filled(4, false)], DType::F64, &Device::Cpu)?;
    let all_s = aggregate_level(&f_s, &f_t, &ones)?.flatten_all()?.to_vec1::<f64>()? == f_s.flatten_all()?.to_vec1::<f64>()?;
    let all_t = aggregate_level(&f_s, &f_t, &zeros)?.flatten_all()?.to_vec1::<f64>()? == f_t.flatten_all()?.to_vec1::<f64>()?;
    Ok((all_s && all_t, format!("full mask gives source {all_s}, empty mask gives target {all_t}")))
}

fn psnr_value() -> Result<(bool, String)> {
    // a uniform error of 0.02 over the [-1, 1] range is 40 dB
    let a = vec![0.0; 64];
    let b = vec![0.02; 64];
    let v = psnr(&a, &b)?;
    Ok(((v - 40.0).abs() <= 1e-9, format!("{v} dB")))
}

fn small_state() -> Result<TrainState> {
    let mut cfg = Config::default();
    cfg.model.resolution = 32;
    cfg.model.heatmap_grid = 16;
    cfg.train.batch_size = 2;
    TrainState::new(cfg)
}

fn training_invariant() -> Result<(bool, String)> {
    let mut state = small_state()?;
    let ds = toy_dataset(3, 32, 9)?;
    let batch = sample_batch(&ds, 0.5, 2, &mut state.rng)?;
    train_step(&mut state, &batch)?;
    let kept = appearance_block_preserved(&state.models, &batch)?;
    Ok((kept, format!("appearance rows bitwise equal: {kept}")))
}

fn checkpoint_round_trip() -> Result<(bool, String)> {
    let state = small_state()?;
    let a = encode_checkpoint(&state)?;
    let b = encode_checkpoint(&decode_checkpoint(&a, &ProviderRegistry::with_defaults())?)?;
    Ok((a == b, format!("{} bytes, identical: {}", a.len(), a == b)))
}
