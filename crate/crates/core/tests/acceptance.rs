//! Acceptance suite. Prints one line per criterion and exits nonzero if any
//! fails. Pass criterion numbers (`1 5 8`) to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use latentswap_core::blending::{aggregate_level, aggregate_pyramid, downsample_mask, FaceMask};
use latentswap_core::latent::{
    apply_transfer_direction, compose_swap_code, merge_code, split_code, structure_split_index, LatentCode,
    TransferDirection,
};
use latentswap_core::losses::{
    adversarial_generator_loss, discriminator_loss, histogram_map, histogram_map_values, identity_loss,
    landmark_alignment_loss, mse, quantile_match, reconstruction_loss, style_transfer_loss, total_loss, HmScope,
    LossWeights,
};
use latentswap_core::metrics::{attribute_error, fid, frechet_distance, gaussian_stats, id_retrieval_rate, GaussianStats};
use latentswap_core::nets::{FeaturePyramid, Image};
use latentswap_core::perception::{
    AnalyticTranslationFlow, AttributeEstimator, IdentityEmbedder, LandmarkEstimator, PerceptualExtractor,
    ToyFlowEstimator, ToyIdentityEmbedder, ToyLandmarkEstimator, ToyPerceptualExtractor,
};
use latentswap_core::pipeline::checkpoint::encode_checkpoint;
use latentswap_core::pipeline::config::Config;
use latentswap_core::pipeline::data::{toy_dataset, Dataset};
use latentswap_core::pipeline::io::image_to_rgb8;
use latentswap_core::pipeline::models::SwapBatch;
use latentswap_core::pipeline::train::{pretrain_generator, self_reconstruction_psnr, train_iteration, TrainState};
use latentswap_core::video::{
    code_trajectory_loss_stacked, flow_trajectory_loss, flow_trajectory_loss_with, flow_trajectory_penalty, FlowMode,
    FtAggregation,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn e<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|err| err.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn tensor(values: Vec<f64>, dims: &[usize]) -> Tensor {
    Tensor::from_vec(values, dims, &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn rel_close(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want.abs().max(1e-300) || (want == 0.0 && got.abs() <= tol)
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

// 1 -------------------------------------------------------------------------

fn latent_algebra() -> Outcome {
    let mut r = rng(1);
    for _ in 0..20 {
        let w = e(LatentCode::new(tensor(uniform(&mut r, 2 * 18 * 16, -3.0, 3.0), &[2, 18, 16]), 7))?;
        let t = e(LatentCode::new(tensor(uniform(&mut r, 2 * 18 * 16, -3.0, 3.0), &[2, 18, 16]), 7))?;
        let (g_s, h_s) = e(split_code(&w))?;
        ensure!(bits(&flat(e(merge_code(&g_s, &h_s))?.tensor())) == bits(&flat(w.tensor())), "round trip changed bits");
        let n_rows = uniform(&mut r, 2 * 7 * 16, -1.0, 1.0);
        let n = e(TransferDirection::new(tensor(n_rows.clone(), &[2, 7, 16])))?;
        let g_hat = e(apply_transfer_direction(&g_s, &n))?;
        let want: Vec<f64> = flat(g_s.tensor()).iter().zip(&n_rows).map(|(a, b)| a + b).collect();
        ensure!(bits(&flat(g_hat.tensor())) == bits(&want), "structure shift is not exact addition");
        let (_, h_t) = e(split_code(&t))?;
        let swap = e(compose_swap_code(&g_hat, &h_t))?;
        let (g2, h2) = e(split_code(&swap))?;
        ensure!(bits(&flat(h2.tensor())) == bits(&flat(h_t.tensor())), "appearance rows differ from target");
        ensure!(bits(&flat(g2.tensor())) == bits(&want), "structure rows differ from shifted code");
    }
    let k = e(structure_split_index(18))?;
    check(k == 7, format!("20 random codes bitwise; split index for 18 vectors = {k}"))
}

// 2 -------------------------------------------------------------------------

/// Uses the first two pixel values of each image as its embedding.
struct PixelEmbedder;
impl IdentityEmbedder for PixelEmbedder {
    fn embed(&self, images: &Tensor) -> latentswap_core::Result<Tensor> {
        Ok(images.flatten_from(1)?.narrow(1, 0, 2)?)
    }
}

/// Flattened pixels as landmark coordinates or perceptual features.
struct Flatten;
impl LandmarkEstimator for Flatten {
    fn estimate(&self, images: &Tensor) -> latentswap_core::Result<Tensor> {
        Ok(images.flatten_from(1)?)
    }
}
impl PerceptualExtractor for Flatten {
    fn features(&self, images: &Tensor) -> latentswap_core::Result<Tensor> {
        Ok(images.flatten_from(1)?)
    }
}

fn two_pixel_image(a: f64, b: f64) -> Tensor {
    let mut v = vec![0.0; 3 * 4 * 4];
    v[0] = a;
    v[1] = b;
    tensor(v, &[1, 3, 4, 4])
}

fn loss_oracles() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let clamp = -(1e-8f64).ln();
    let s = |v: &[f64]| tensor(v.to_vec(), &[v.len()]);
    let c = |v: f64| tensor(vec![v; 2 * 3 * 4 * 4], &[2, 3, 4, 4]);
    let mut cases: Vec<(&str, f64, f64)> = vec![
        ("adv all ones", scalar(&e(adversarial_generator_loss(&s(&[1.0, 1.0, 1.0])))?), 0.0),
        ("adv 0.5", scalar(&e(adversarial_generator_loss(&s(&[0.5])))?), ln2),
        ("adv 0 clamped", scalar(&e(adversarial_generator_loss(&s(&[0.0])))?), clamp),
        ("disc perfect", scalar(&e(discriminator_loss(&s(&[0.0]), &s(&[1.0])))?), 0.0),
        ("disc 0.5", scalar(&e(discriminator_loss(&s(&[0.5]), &s(&[0.5])))?), 2.0 * ln2),
        ("disc fake 1", scalar(&e(discriminator_loss(&s(&[1.0]), &s(&[1.0])))?), clamp),
        ("mse constant fields", scalar(&e(mse(&c(0.25), &c(-0.25)))?), 0.25),
    ];
    let a = two_pixel_image(1.0, 0.0);
    let b = two_pixel_image(0.0, 1.0);
    let h = two_pixel_image(1.0, 1.0);
    cases.push(("id self", scalar(&e(identity_loss(&h, &h, &PixelEmbedder))?), 0.0));
    cases.push(("id orthogonal", scalar(&e(identity_loss(&a, &b, &PixelEmbedder))?), 1.0));
    cases.push(("id 45 degrees", scalar(&e(identity_loss(&a, &h, &PixelEmbedder))?), 1.0 - 0.5f64.sqrt()));
    let x_t = tensor(uniform(&mut rng(2), 2 * 3 * 4 * 4, -0.5, 0.5), &[2, 3, 4, 4]);
    let shifted = x_t.affine(1.0, 0.1).unwrap();
    cases.push(("lmk identical", scalar(&e(landmark_alignment_loss(&x_t, &x_t, &x_t, &Flatten))?), 0.0));
    cases.push(("lmk offset 0.1", scalar(&e(landmark_alignment_loss(&shifted, &x_t, &x_t, &Flatten))?), 0.01));
    cases.push((
        "rec different identity",
        scalar(&e(reconstruction_loss(&shifted, &shifted, &x_t, &[false, false], 0.8, &Flatten))?),
        0.0,
    ));
    cases.push((
        "rec identical",
        scalar(&e(reconstruction_loss(&x_t, &x_t, &x_t, &[true, true], 0.8, &Flatten))?),
        0.0,
    ));
    cases.push((
        "rec offset 0.1",
        scalar(&e(reconstruction_loss(&x_t, &shifted, &x_t, &[true, true], 0.8, &Flatten))?),
        0.018,
    ));
    let w = LossWeights::default();
    cases.push(("total unit components", e(total_loss([1.0; 5], &w))?, 5.3));
    cases.push(("total zeros", e(total_loss([0.0; 5], &w))?, 0.0));
    let zero_w = LossWeights {
        adv: 0.0,
        id: 0.0,
        lmk: 0.0,
        rec: 0.0,
        st: 0.0,
    };
    cases.push(("total zero weights", e(total_loss([3.0, 1.0, 4.0, 1.0, 5.0], &zero_w))?, 0.0));
    let bad: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| !rel_close(*got, *want, 1e-9))
        .map(|(n, got, want)| format!("{n}: {got} vs {want}"))
        .collect();
    check(bad.is_empty(), if bad.is_empty() { format!("{} worked examples within 1e-9", cases.len()) } else { bad.join("; ") })
}

// 3 -------------------------------------------------------------------------

/// Relative error between the autograd gradient of `f` at `x` and central
/// finite differences over every coordinate.
fn gradient_error(x: &Tensor, f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(x).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic = flat(grads.get(var.as_tensor()).unwrap());
    let base = flat(x);
    let h = 1e-6;
    let numeric: Vec<f64> = (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] += h;
            let mut m = base.clone();
            m[i] -= h;
            let fp = scalar(&f(&tensor(p, x.dims())));
            let fm = scalar(&f(&tensor(m, x.dims())));
            (fp - fm) / (2.0 * h)
        })
        .collect();
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(&analytic).max(norm(&numeric)).max(1e-12)
}

fn gradient_checks() -> Outcome {
    let mut r = rng(3);
    let img = |r: &mut ChaCha8Rng, side: usize| tensor(uniform(r, 3 * side * side, -1.0, 1.0), &[1, 3, side, side]);
    let id = e(ToyIdentityEmbedder::new(5))?;
    let lmk = e(ToyLandmarkEstimator::new(5, 6))?;
    let per = e(ToyPerceptualExtractor::new(5))?;
    let (x_s, x_t, y_s, y_f) = (img(&mut r, 16), img(&mut r, 16), img(&mut r, 16), img(&mut r, 16));
    let mut errors: Vec<(&str, f64)> = Vec::new();

    errors.push(("identity", gradient_error(&y_f, &|y| identity_loss(y, &x_s, &id).unwrap())));
    errors.push(("landmark/y_s", gradient_error(&y_s, &|y| landmark_alignment_loss(y, &y_f, &x_t, &lmk).unwrap())));
    errors.push(("landmark/y_f", gradient_error(&y_f, &|y| landmark_alignment_loss(&y_s, y, &x_t, &lmk).unwrap())));
    errors.push((
        "reconstruction/y_s",
        gradient_error(&y_s, &|y| reconstruction_loss(y, &y_f, &x_t, &[true], 0.8, &per).unwrap()),
    ));
    errors.push((
        "reconstruction/y_f",
        gradient_error(&y_f, &|y| reconstruction_loss(&y_s, y, &x_t, &[true], 0.8, &per).unwrap()),
    ));

    // the guidance image is a constant target, so the reference objective
    // holds it fixed at the evaluation point
    let y8 = img(&mut r, 8);
    let t8 = img(&mut r, 8);
    let mask = FaceMask::rect(8, 1, 1, 7, 6);
    let guide = e(histogram_map(&y8, &t8, std::slice::from_ref(&mask), HmScope::Mask))?;
    let st_err = gradient_error(&y8, &|y| mse(y, &guide).unwrap());
    let st_grad = {
        let v = Var::from_tensor(&y8).unwrap();
        let g = style_transfer_loss(v.as_tensor(), &t8, std::slice::from_ref(&mask), HmScope::Mask)
            .unwrap()
            .backward()
            .unwrap();
        flat(g.get(v.as_tensor()).unwrap())
    };
    let ref_grad = {
        let v = Var::from_tensor(&y8).unwrap();
        let g = mse(v.as_tensor(), &guide).unwrap().backward().unwrap();
        flat(g.get(v.as_tensor()).unwrap())
    };
    let same_grad = st_grad.iter().zip(&ref_grad).all(|(a, b)| (a - b).abs() <= 1e-12);
    errors.push(("style transfer", if same_grad { st_err } else { f64::INFINITY }));

    let scores = tensor(uniform(&mut r, 6, 0.05, 0.95), &[6]);
    let real = tensor(uniform(&mut r, 6, 0.05, 0.95), &[6]);
    errors.push(("adversarial", gradient_error(&scores, &|s| adversarial_generator_loss(s).unwrap())));
    errors.push(("discriminator", gradient_error(&scores, &|s| discriminator_loss(s, &real).unwrap())));

    let codes = tensor(uniform(&mut r, 4 * 3 * 5, -1.0, 1.0), &[4, 3, 5]);
    let target = tensor(uniform(&mut r, 4 * 3 * 5, -1.0, 1.0), &[4, 3, 5]);
    errors.push(("code trajectory", gradient_error(&codes, &|g| code_trajectory_loss_stacked(g, &target).unwrap())));

    let flows: Vec<Tensor> = (0..6).map(|_| tensor(uniform(&mut r, 2 * 8 * 8, -2.0, 2.0), &[2, 8, 8])).collect();
    for (mode, agg, name) in [
        (FlowMode::Literal, FtAggregation::Group, "flow trajectory literal/group"),
        (FlowMode::Midpoint, FtAggregation::Group, "flow trajectory midpoint/group"),
        (FlowMode::Literal, FtAggregation::PlainMse, "flow trajectory literal/plain"),
    ] {
        let f01 = Tensor::stack(&flows[..2], 0).unwrap();
        let err = gradient_error(&f01, &|f| {
            let triples = vec![
                (f.get(0).unwrap(), flows[2].clone(), flows[3].clone()),
                (f.get(1).unwrap(), flows[4].clone(), flows[5].clone()),
            ];
            flow_trajectory_penalty(&triples, mode, agg).unwrap()
        });
        errors.push((name, err));
        let f02 = flows[2].clone();
        let err2 = gradient_error(&f02, &|f| {
            flow_trajectory_penalty(&[(flows[0].clone(), f.clone(), flows[3].clone())], mode, agg).unwrap()
        });
        errors.push((name, err2));
    }

    let worst = errors.iter().cloned().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let bad: Vec<String> = errors
        .iter()
        .filter(|(_, err)| !(*err <= 1e-3))
        .map(|(n, err)| format!("{n}: {err:e}"))
        .collect();
    check(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} checks, worst {} at {:.2e}", errors.len(), worst.0, worst.1)
        } else {
            bad.join("; ")
        },
    )
}

// 4 -------------------------------------------------------------------------

/// Independent quantile mapping: rank average over ties, position
/// r / (n - 1) in the sorted reference, linear interpolation.
fn oracle_quantile(values: &[f64], reference: &[f64]) -> Vec<f64> {
    let mut sorted = reference.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    values
        .iter()
        .map(|&v| {
            let below = values.iter().filter(|&&u| u < v).count() as f64;
            let equal = values.iter().filter(|&&u| u == v).count() as f64;
            let rank = below + (equal - 1.0) / 2.0;
            let q = if n == 1 { 0.5 } else { rank / (n - 1) as f64 };
            let pos = q * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(sorted.len() - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        })
        .collect()
}

fn histogram_mapping() -> Outcome {
    // one channel of interest; the others are equal so they map to themselves
    let mut y = vec![0.0; 12];
    let mut reference = vec![0.0; 12];
    y[..4].copy_from_slice(&[0.0, 1.0, 2.0, 3.0]);
    reference[..4].copy_from_slice(&[10.0, 11.0, 12.0, 13.0]);
    let (out, empty) = e(histogram_map_values(&y, &reference, &FaceMask::filled(2, true), HmScope::Mask))?;
    ensure!(!empty && out[..4] == [10.0, 11.0, 12.0, 13.0], "equal-count mapping gave {:?}", &out[..4]);
    let q = quantile_match(&[0.0, 100.0], &[50.0, 60.0, 70.0]);
    ensure!(q == vec![50.0, 70.0], "quantile case gave {q:?}");

    let mut r = rng(4);
    let x = tensor(uniform(&mut r, 3 * 16 * 16, -1.0, 1.0), &[1, 3, 16, 16]);
    let mask = FaceMask::ellipse(16, 0.5, 0.5, 0.35, 0.4);
    let same = e(histogram_map(&x, &x, std::slice::from_ref(&mask), HmScope::Mask))?;
    ensure!(bits(&flat(&same)) == bits(&flat(&x)), "HM(x, x, m) != x");

    let mut worst_oracle = 0.0f64;
    for trial in 0..100 {
        let side = 8;
        let plane = side * side;
        // quantized values force ties
        let yv: Vec<f64> = (0..3 * plane).map(|_| (r.gen_range(0..20) as f64) / 10.0 - 1.0).collect();
        let rv = uniform(&mut r, 3 * plane, -1.0, 1.0);
        let m = FaceMask::new((0..plane).map(|_| if r.gen_bool(0.6) { 1.0 } else { 0.0 }).collect(), side);
        let m = e(m)?;
        let (out, _) = e(histogram_map_values(&yv, &rv, &m, HmScope::Mask))?;
        for c in 0..3 {
            let inside: Vec<usize> = (0..plane).filter(|&p| m.values()[p] >= 0.5).collect();
            let ys: Vec<f64> = inside.iter().map(|&p| yv[c * plane + p]).collect();
            let rs: Vec<f64> = inside.iter().map(|&p| rv[c * plane + p]).collect();
            let want = oracle_quantile(&ys, &rs);
            for (k, &p) in inside.iter().enumerate() {
                worst_oracle = worst_oracle.max((out[c * plane + p] - want[k]).abs());
            }
            for &p in &inside {
                for &q in &inside {
                    ensure!(
                        !(yv[c * plane + p] <= yv[c * plane + q] && out[c * plane + p] > out[c * plane + q]),
                        "monotonicity broken in trial {trial}"
                    );
                }
            }
            for p in (0..plane).filter(|&p| m.values()[p] < 0.5) {
                ensure!(out[c * plane + p] == yv[c * plane + p], "outside pixel changed in trial {trial}");
            }
        }
    }
    check(
        worst_oracle <= 1e-12,
        format!("examples exact, idempotent, 100 random instances monotone; oracle gap {worst_oracle:e}"),
    )
}

// 5 -------------------------------------------------------------------------

fn stats(mean: &[f64], cov: &[f64]) -> GaussianStats {
    let d = mean.len();
    GaussianStats {
        mean: DVector::from_vec(mean.to_vec()),
        cov: DMatrix::from_row_slice(d, d, cov),
    }
}

fn frechet_suite() -> Outcome {
    let mut r = rng(5);
    let imgs: Vec<Image> = (0..12)
        .map(|_| Image::from_chw(uniform(&mut r, 3 * 4 * 4, -1.0, 1.0), 4, DType::F64, &Device::Cpu).unwrap())
        .collect();
    let extract = |x: &Image| -> latentswap_core::Result<Vec<f64>> { Ok(x.to_vec()?[..5].to_vec()) };
    let own = e(fid(&imgs, &imgs, extract))?;
    ensure!(own.abs() <= 1e-6, "self FID {own}");
    let a = e(frechet_distance(&stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]), &stats(&[3.0, 4.0], &[1.0, 0.0, 0.0, 1.0])))?;
    ensure!((a - 25.0).abs() <= 1e-6, "mean shift case {a}");
    let b = e(frechet_distance(&stats(&[0.0], &[4.0]), &stats(&[0.0], &[1.0])))?;
    ensure!((b - 1.0).abs() <= 1e-6, "variance case {b}");
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = r.gen_range(3..12);
        let d = r.gen_range(1..6);
        let fa: Vec<Vec<f64>> = (0..n).map(|_| uniform(&mut r, d, -1.0, 1.0)).collect();
        let fb: Vec<Vec<f64>> = (0..n).map(|_| uniform(&mut r, d, -0.5, 1.5)).collect();
        let (sa, sb) = (e(gaussian_stats(&fa))?, e(gaussian_stats(&fb))?);
        let (ab, ba) = (e(frechet_distance(&sa, &sb))?, e(frechet_distance(&sb, &sa))?);
        worst = worst.max((ab - ba).abs() / ab.abs().max(1e-300));
    }
    check(
        worst <= 1e-8,
        format!("self {own:.1e}, analytic 25 -> {a}, 1 -> {b}, worst asymmetry {worst:.1e}"),
    )
}

// 6 -------------------------------------------------------------------------

fn trajectory_suite() -> Outcome {
    let mut r = rng(6);
    let target = tensor(uniform(&mut r, 5 * 4 * 6, -1.0, 1.0), &[5, 4, 6]);
    let offset = tensor(uniform(&mut r, 4 * 6, -2.0, 2.0), &[1, 4, 6]);
    let swapped = target.broadcast_add(&offset).unwrap();
    let ct = scalar(&e(code_trajectory_loss_stacked(&swapped, &target))?);
    ensure!(ct.abs() <= 1e-12, "constant offset gives L_ct = {ct}");

    let flow = AnalyticTranslationFlow { velocity: (1.0, 0.0) };
    let lit = e(flow_trajectory_loss_with(3, |i, j| Ok(flow.between(i, j, 8, 8)), FlowMode::Literal, FtAggregation::Group))?;
    let mid = e(flow_trajectory_loss_with(3, |i, j| Ok(flow.between(i, j, 8, 8)), FlowMode::Midpoint, FtAggregation::Group))?;
    ensure!((lit - 0.5f64.sqrt()).abs() <= 1e-9, "literal {lit}");
    ensure!(mid.abs() <= 1e-9, "midpoint {mid}");

    let frame = Image::from_chw(uniform(&mut r, 3 * 16 * 16, -1.0, 1.0), 16, DType::F64, &Device::Cpu).unwrap();
    let still = vec![frame; 4];
    let mut statics = Vec::new();
    for mode in [FlowMode::Literal, FlowMode::Midpoint] {
        statics.push(e(flow_trajectory_loss(&still, &ToyFlowEstimator, mode, FtAggregation::Group))?);
        let zero = AnalyticTranslationFlow { velocity: (0.0, 0.0) };
        statics.push(e(flow_trajectory_loss_with(4, |i, j| Ok(zero.between(i, j, 8, 8)), mode, FtAggregation::Group))?);
    }
    ensure!(statics.iter().all(|&v| v == 0.0), "static sequences gave {statics:?}");
    Ok(format!("L_ct offset {ct:.1e}; literal {lit:.12}; midpoint {mid:.1e}; static 0 in both modes"))
}

// 7 -------------------------------------------------------------------------

fn blending_suite() -> Outcome {
    let mut r = rng(7);
    let side = 16;
    // binary mask at native resolution: bitwise selection
    let mask = e(FaceMask::new((0..side * side).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(), side))?;
    let f_s = tensor(uniform(&mut r, 2 * 4 * side * side, -3.0, 3.0), &[2, 4, side, side]);
    let f_t = tensor(uniform(&mut r, 2 * 4 * side * side, -3.0, 3.0), &[2, 4, side, side]);
    let coarse_s = tensor(uniform(&mut r, 2 * 4 * 64, -3.0, 3.0), &[2, 4, 8, 8]);
    let coarse_t = tensor(uniform(&mut r, 2 * 4 * 64, -3.0, 3.0), &[2, 4, 8, 8]);
    let out = e(aggregate_pyramid(
        &e(FeaturePyramid::new(vec![coarse_s, f_s.clone()]))?,
        &e(FeaturePyramid::new(vec![coarse_t, f_t.clone()]))?,
        std::slice::from_ref(&mask),
        false,
    ))?;
    let (o, s, t) = (flat(&out.levels()[1]), flat(&f_s), flat(&f_t));
    let plane = side * side;
    for i in 0..o.len() {
        let m = mask.values()[i % plane];
        let want = if m == 1.0 { s[i] } else { t[i] };
        ensure!(o[i].to_bits() == want.to_bits(), "element {i} not a bitwise selection");
    }

    // convexity on 1000 random elements with a soft mask
    let n = 1000;
    let a = uniform(&mut r, n, -5.0, 5.0);
    let b = uniform(&mut r, n, -5.0, 5.0);
    let m = uniform(&mut r, n, 0.0, 1.0);
    let blended = flat(&e(aggregate_level(
        &tensor(a.clone(), &[1, 1, 1, n]),
        &tensor(b.clone(), &[1, 1, 1, n]),
        &tensor(m, &[1, 1, 1, n]),
    ))?);
    for i in 0..n {
        let (lo, hi) = (a[i].min(b[i]), a[i].max(b[i]));
        ensure!(blended[i] >= lo && blended[i] <= hi, "element {i} outside [{lo}, {hi}]");
    }

    // area averaging equals brute-force block means
    let big = e(FaceMask::new((0..64 * 64).map(|_| if r.gen_bool(0.4) { 1.0 } else { 0.0 }).collect(), 64))?;
    for level in [32usize, 16, 8, 4, 1] {
        let f = 64 / level;
        let got = e(downsample_mask(&big, level))?;
        for by in 0..level {
            for bx in 0..level {
                let mut count = 0usize;
                for y in by * f..(by + 1) * f {
                    for x in bx * f..(bx + 1) * f {
                        count += (big.values()[y * 64 + x] == 1.0) as usize;
                    }
                }
                let want = count as f64 / (f * f) as f64;
                ensure!(got.values()[by * level + bx] == want, "level {level} block ({bx},{by})");
            }
        }
    }
    Ok("binary selection bitwise, 1000 elements convex, block means exact at 5 levels".into())
}

// 8 and 9 -------------------------------------------------------------------

const SMOKE_SEED: u64 = 2024;
const PSNR_TARGET: f64 = 25.0;
const MAX_OVERFIT_STEPS: usize = 2000;
const PSNR_EVERY: usize = 25;

fn smoke_config() -> Config {
    let mut cfg = Config::default();
    cfg.model.resolution = 64;
    cfg.train.batch_size = 4;
    cfg.train.seed = SMOKE_SEED;
    cfg
}

struct OverfitRun {
    pretrained_psnr: f64,
    psnr: f64,
    steps: usize,
    pretrain: usize,
    checkpoint: Vec<u8>,
    image: Vec<u8>,
}

fn overfit_run() -> Result<OverfitRun, String> {
    let mut cfg = smoke_config();
    cfg.train.p_same = 1.0;
    let pretrain = cfg.train.pretrain_iterations;
    let data: Dataset = e(toy_dataset(1, 64, SMOKE_SEED))?;
    let mut state = e(TrainState::new(cfg))?;
    e(pretrain_generator(&mut state, &data, pretrain))?;
    let pretrained_psnr = e(self_reconstruction_psnr(&state.models, &data))?;
    // only counts once overfitting has actually run
    let mut psnr = f64::NEG_INFINITY;
    let mut steps = 0;
    while psnr < PSNR_TARGET && steps < MAX_OVERFIT_STEPS {
        e(train_iteration(&mut state, &data))?;
        steps += 1;
        if steps % PSNR_EVERY == 0 {
            psnr = e(self_reconstruction_psnr(&state.models, &data))?;
        }
    }
    let s = &data.samples[0];
    let batch = SwapBatch {
        x_s: e(s.image.tensor().unsqueeze(0))?,
        x_t: e(s.image.tensor().unsqueeze(0))?,
        masks: vec![s.mask.clone()],
        l_s: vec![s.landmarks.clone()],
        l_t: vec![s.landmarks.clone()],
        same: vec![true],
    };
    let y_f = e(state.models.swap_forward(&batch))?.rendered.y_f;
    let img = e(Image::new(e(y_f.detach().get(0))?))?;
    Ok(OverfitRun {
        pretrained_psnr,
        psnr,
        steps,
        pretrain,
        checkpoint: e(encode_checkpoint(&state))?,
        image: e(image_to_rgb8(&img))?.into_raw(),
    })
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn smoke(first: &mut Option<OverfitRun>) -> Outcome {
    let run = overfit_run()?;
    let a = format!(
        "(a) pretrain {} steps (PSNR {:.2} dB) + {} overfit steps -> PSNR {:.2} dB",
        run.pretrain, run.pretrained_psnr, run.steps, run.psnr
    );
    let a_ok = run.psnr >= PSNR_TARGET;
    *first = Some(run);

    // swap training from initialization, at the default pair mix
    let data = e(toy_dataset(8, 64, SMOKE_SEED + 1))?;
    let mut state = e(TrainState::new(smoke_config()))?;
    let mut totals = Vec::with_capacity(200);
    for _ in 0..200 {
        totals.push(e(train_iteration(&mut state, &data))?.losses.total);
    }
    let (head, tail) = (median(&totals[..20]), median(&totals[180..]));
    let b = format!("(b) median total loss first 20 {head:.4}, last 20 {tail:.4}");
    check(a_ok && tail < head, format!("{a}; {b}"))
}

fn determinism(first: &mut Option<OverfitRun>) -> Outcome {
    let a = match first.take() {
        Some(run) => run,
        None => overfit_run()?,
    };
    let b = overfit_run()?;
    let same_ckpt = a.checkpoint == b.checkpoint;
    let same_img = a.image == b.image;
    check(
        same_ckpt && same_img && a.steps == b.steps,
        format!(
            "checkpoints identical: {same_ckpt} ({} bytes), images identical: {same_img}, steps {} and {}",
            a.checkpoint.len(),
            a.steps,
            b.steps
        ),
    )
}

// 10 ------------------------------------------------------------------------

/// Returns `(3, 4)` for images whose first pixel is positive, else zeros.
struct Fixed345;
impl AttributeEstimator for Fixed345 {
    fn features(&self, image: &Image) -> latentswap_core::Result<Vec<f64>> {
        Ok(if image.to_vec()?[0] > 0.0 { vec![3.0, 4.0] } else { vec![0.0, 0.0] })
    }
}

fn metric_sanity() -> Outcome {
    let basis = |i: usize| -> Vec<f64> { (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect() };
    let sources: Vec<Vec<f64>> = (0..3).map(basis).collect();
    let perfect = e(id_retrieval_rate(&sources, &sources, &[0, 1, 2]))?;
    let swapped = vec![basis(0), basis(1), basis(0)];
    let one_wrong = e(id_retrieval_rate(&swapped, &sources, &[0, 1, 2]))?;
    let on = Image::constant(0.5, 4, DType::F64, &Device::Cpu).unwrap();
    let off = Image::constant(-0.5, 4, DType::F64, &Device::Cpu).unwrap();
    let single = e(attribute_error(&[on.clone()], &[off.clone()], &Fixed345))?;
    let pair = e(attribute_error(&[on, off.clone()], &[off.clone(), off], &Fixed345))?;
    check(
        perfect == 1.0 && one_wrong == 2.0 / 3.0 && single == 5.0 && pair == 2.5,
        format!("retrieval {perfect} and {one_wrong}; attribute error {single} and {pair}"),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut first_run: Option<OverfitRun> = None;
    let mut failures = 0;
    let criteria: Vec<(usize, &str, Duration)> = vec![
        (1, "latent algebra", Duration::from_secs(1)),
        (2, "loss oracles", Duration::from_secs(5)),
        (3, "gradient checks", Duration::from_secs(120)),
        (4, "histogram mapping", Duration::from_secs(10)),
        (5, "frechet distance", Duration::from_secs(5)),
        (6, "trajectory losses", Duration::from_secs(5)),
        (7, "feature blending", Duration::from_secs(10)),
        (8, "end-to-end smoke", Duration::from_secs(30 * 60)),
        (9, "determinism", Duration::from_secs(30 * 60)),
        (10, "metric sanity", Duration::from_secs(1)),
    ];
    for (n, name, budget) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| match n {
            1 => latent_algebra(),
            2 => loss_oracles(),
            3 => gradient_checks(),
            4 => histogram_mapping(),
            5 => frechet_suite(),
            6 => trajectory_suite(),
            7 => blending_suite(),
            8 => smoke(&mut first_run),
            9 => determinism(&mut first_run),
            _ => metric_sanity(),
        }))
        .unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let (status, detail) = match result {
            Ok(d) if elapsed <= budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; took {elapsed:.1?}, budget {budget:?}")),
            Err(d) => ("FAIL", d),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!("criterion {n:>2} {status} {name} [{elapsed:.2?}]: {detail}");
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
