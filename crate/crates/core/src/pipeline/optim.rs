use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

/// Adam over a fixed, named parameter set. Parameters that receive no
/// gradient in a step are left untouched, moments included.
#[derive(Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    vars: BTreeMap<String, Var>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(vars: BTreeMap<String, Var>, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in &vars {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            vars,
            m,
            v,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Applies one update from `grads`.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients can carry op history; detached moments keep each
            // step's graph from being chained onto the next
            let g = g.detach();
            let m = (self.m[name].affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?.detach();
            let v = (self.v[name].affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?.detach();
            let m_hat = m.affine(1.0 / bc1, 0.0)?;
            let denom = v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, self.epsilon)?;
            let update = (m_hat / denom)?.affine(self.learning_rate, 0.0)?;
            var.set(&(var.as_tensor().detach() - update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// First and second moments keyed by parameter name.
    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.m, &self.v)
    }

    pub fn set_moment(&mut self, which: Moment, name: &str, value: Tensor) -> Result<()> {
        let map = match which {
            Moment::First => &mut self.m,
            Moment::Second => &mut self.v,
        };
        let slot = map
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer has no parameter `{name}`")))?;
        if slot.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "moment `{name}` has shape {:?}, expected {:?}",
                value.dims(),
                slot.dims()
            )));
        }
        *slot = value.to_dtype(slot.dtype())?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Moment {
    First,
    Second,
}
