use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Var,
    v: Var,
}

/// Adam with bias correction. Moment buffers are exported by name for checkpoints.
pub struct Adam {
    slots: Vec<Slot>,
    config: AdamConfig,
    step: u64,
}

impl Adam {
    pub fn new(named_vars: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        let slots = named_vars
            .into_iter()
            .map(|(name, var)| {
                let m = Var::zeros(var.shape(), var.dtype(), var.device())?;
                let v = Var::zeros(var.shape(), var.dtype(), var.device())?;
                Ok(Slot { name, var, m, v })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            slots,
            config,
            step: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for slot in &self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let m = ((slot.m.as_tensor() * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((slot.v.as_tensor() * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            slot.var.set(&(slot.var.as_tensor() - (update * lr)?)?)?;
            slot.m.set(&m)?;
            slot.v.set(&v)?;
        }
        Ok(())
    }

    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for slot in &self.slots {
            out.insert(format!("m.{}", slot.name), slot.m.as_tensor().copy().expect("cpu copy"));
            out.insert(format!("v.{}", slot.name), slot.v.as_tensor().copy().expect("cpu copy"));
        }
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        for slot in &self.slots {
            for (prefix, buf) in [("m", &slot.m), ("v", &slot.v)] {
                let key = format!("{prefix}.{}", slot.name);
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor `{key}`")))?;
                if t.dims() != buf.dims() {
                    return Err(Error::Checkpoint(format!("optimizer tensor `{key}` has wrong shape")));
                }
                buf.set(&t.to_dtype(buf.dtype())?)?;
            }
        }
        self.step = step;
        Ok(())
    }
}
