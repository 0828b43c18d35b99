//! Named trainable tensors with seeded initialization and a freeze switch.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A handle to one parameter. Cloning shares storage with the owning store.
#[derive(Clone, Debug)]
pub struct Param {
    var: Var,
    frozen: Arc<AtomicBool>,
}

impl Param {
    /// The value to use in a forward pass; detached while the store is frozen
    /// so no gradient is accumulated for it.
    pub fn t(&self) -> Tensor {
        if self.frozen.load(Ordering::Relaxed) {
            self.var.as_tensor().detach()
        } else {
            self.var.as_tensor().clone()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }
}

/// All parameters of one network, keyed `<prefix>/<name>`.
#[derive(Debug)]
pub struct ParamStore {
    prefix: String,
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
    frozen: Arc<AtomicBool>,
    rng: ChaCha8Rng,
}

/// Stable per-name stream so that initial values do not depend on the order
/// in which networks are built.
fn stream_seed(seed: u64, prefix: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in prefix.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

impl ParamStore {
    pub fn new(prefix: &str, seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            prefix: prefix.to_string(),
            dtype,
            device: device.clone(),
            vars: BTreeMap::new(),
            frozen: Arc::new(AtomicBool::new(false)),
            rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, prefix)),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Param> {
        let full = format!("{}/{}", self.prefix, name);
        if self.vars.contains_key(&full) {
            return Err(Error::InvalidConfig(format!("duplicate parameter {full}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(full, var.clone());
        Ok(Param {
            var,
            frozen: self.frozen.clone(),
        })
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Param> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Param> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn set_frozen(&self, frozen: bool) {
        self.frozen.store(frozen, Ordering::Relaxed);
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.load(Ordering::Relaxed)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, full_name: &str) -> Option<&Var> {
        self.vars.get(full_name)
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}
