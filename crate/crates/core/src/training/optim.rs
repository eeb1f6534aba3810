//! AdamW with decoupled weight decay and per-parameter step counts.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{WeightManifest, WeightRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
    steps: u64,
}

pub struct AdamW {
    cfg: AdamWConfig,
    slots: Vec<Slot>,
}

impl std::fmt::Debug for AdamW {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdamW")
            .field("cfg", &self.cfg)
            .field("params", &self.slots.len())
            .finish()
    }
}

/// Moment buffers and step counts, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// Records `m.<name>` and `v.<name>`.
    pub moments: WeightManifest,
    pub steps: Vec<(String, u64)>,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|(name, var)| {
                let zeros = var.as_tensor().zeros_like()?;
                Ok(Slot {
                    name,
                    m: zeros.clone(),
                    v: zeros,
                    var,
                    steps: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, slots })
    }

    pub fn config(&self) -> AdamWConfig {
        self.cfg
    }

    /// One update at learning rate `lr`. Parameters without a gradient are left
    /// untouched and their step counts do not advance.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            // keep the moments free of the backward graph
            let g = &g.detach();
            slot.steps += 1;
            let t = slot.steps as i32;
            let theta = slot.var.as_tensor().detach();
            let theta = if weight_decay != 0.0 {
                (theta * (1.0 - lr * weight_decay))?
            } else {
                theta
            };
            slot.m = ((&slot.m * beta1)? + (g * (1.0 - beta1))?)?;
            slot.v = ((&slot.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&slot.m / (1.0 - beta1.powi(t)))?;
            let v_hat = (&slot.v / (1.0 - beta2.powi(t)))?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            slot.var.set(&(theta - (update * lr)?)?)?;
        }
        Ok(())
    }

    pub fn state(&self) -> Result<OptimizerState> {
        let mut records = Vec::with_capacity(2 * self.slots.len());
        for s in &self.slots {
            records.push(WeightRecord::from_tensor(format!("m.{}", s.name), &s.m)?);
            records.push(WeightRecord::from_tensor(format!("v.{}", s.name), &s.v)?);
        }
        Ok(OptimizerState {
            moments: WeightManifest { records },
            steps: self.slots.iter().map(|s| (s.name.clone(), s.steps)).collect(),
        })
    }

    pub fn load_state(&mut self, state: &OptimizerState) -> Result<()> {
        let m = state.moments.subset("m");
        let v = state.moments.subset("v");
        let find = |man: &WeightManifest, name: &str| {
            man.records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::WeightMismatch(format!("optimizer state lacks `{name}`")))
                .cloned()
        };
        for slot in &mut self.slots {
            let steps = state
                .steps
                .iter()
                .find(|(n, _)| *n == slot.name)
                .map(|(_, s)| *s)
                .ok_or_else(|| Error::WeightMismatch(format!("optimizer state lacks `{}`", slot.name)))?;
            let (dtype, device) = (slot.var.dtype(), slot.var.device().clone());
            let mr = find(&m, &slot.name)?;
            let vr = find(&v, &slot.name)?;
            if mr.shape != slot.var.dims() || vr.shape != slot.var.dims() {
                return Err(Error::WeightMismatch(format!(
                    "optimizer moments for `{}` have the wrong shape",
                    slot.name
                )));
            }
            slot.m = mr.to_tensor(dtype, &device)?;
            slot.v = vr.to_tensor(dtype, &device)?;
            slot.steps = steps;
        }
        Ok(())
    }
}
