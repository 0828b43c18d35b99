use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Standard-normal tensor from a fixed seed.
pub fn seeded_tensor(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn seeded_uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Relative error `|a - n| / max(|a|, |n|)` between the autograd gradient of
/// `f` at `x` and central finite differences over every coordinate.
pub fn grad_rel_error<F>(x: &Tensor, f: F) -> f64
where
    F: Fn(&Tensor) -> Tensor,
{
    let var = candle_core::Var::from_tensor(x).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    let analytic = grads.get(var.as_tensor()).map(flat).unwrap_or_else(|| vec![0.0; x.elem_count()]);
    let base = flat(x);
    let h = 1e-6;
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let at = |v: Vec<f64>| {
            let t = Tensor::from_vec(v, x.dims(), &Device::Cpu).unwrap();
            f(&t).to_scalar::<f64>().unwrap()
        };
        numeric.push((at(plus) - at(minus)) / (2.0 * h));
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}
