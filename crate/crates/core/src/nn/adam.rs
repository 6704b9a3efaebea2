use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// Adam with bias-corrected moments whose state can be saved and restored.
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, ps: &ParamStore) -> Result<Self> {
        if !(config.lr > 0.0) || !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::param(format!("invalid optimizer settings {config:?}")));
        }
        let zeros = |_: &String, var: &candle_core::Var| var.as_tensor().zeros_like();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in ps.vars() {
            m.insert(name.clone(), zeros(name, var)?);
            v.insert(name.clone(), zeros(name, var)?);
        }
        Ok(Self { config, step: 0, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update; parameters without a gradient keep their value.
    pub fn step(&mut self, ps: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, var) in ps.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = self.m.get_mut(name).expect("moments cover every parameter");
            let v = self.v.get_mut(name).expect("moments cover every parameter");
            *m = ((&*m * beta1)? + (g * (1.0 - beta1))?)?;
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((&*v / c2)?.sqrt()? + eps)?;
            let update = ((&*m / c1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<param>` / `v.<param>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    pub fn restore(&mut self, step: u64, state: &BTreeMap<String, Tensor>) -> Result<()> {
        for (prefix, map) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (k, t) in map.iter_mut() {
                let saved = state
                    .get(&format!("{prefix}.{k}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment {prefix}.{k}")))?;
                if saved.dims() != t.dims() {
                    return Err(Error::Checkpoint(format!("optimizer moment {prefix}.{k} has wrong shape")));
                }
                *t = saved.to_dtype(t.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}
