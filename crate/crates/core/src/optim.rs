//! Adam with moments that can be checkpointed.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor};

use crate::error::{LabError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Updates every variable of `store` that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.cfg.beta1)? + (g * (1.0 - self.cfg.beta1))?)?,
                None => (g * (1.0 - self.cfg.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.cfg.beta2)? + (g.sqr()? * (1.0 - self.cfg.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.cfg.beta2))?,
            };
            let denom = ((&v / c2)?.sqrt()? + self.cfg.eps)?;
            let update = ((&m / c1)? / denom)?;
            var.set(&(var.as_tensor().detach() - (update * self.cfg.lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn to_arrays(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.m {
            out.insert(format!("m/{k}"), v.clone());
        }
        for (k, v) in &self.v {
            out.insert(format!("v/{k}"), v.clone());
        }
        out
    }

    pub fn restore(&mut self, step: usize, arrays: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (k, t) in arrays {
            if let Some(name) = k.strip_prefix("m/") {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("v/") {
                self.v.insert(name.to_string(), t.clone());
            } else {
                return Err(LabError::Checkpoint(format!("unexpected optimiser array {k}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamSpec};
    use candle_core::DType;

    #[test]
    fn minimises_quadratic() {
        let specs = vec![ParamSpec::new("x", &[2], Init::Values(vec![3.0, -2.0]))];
        let store = ParamStore::initialize(&specs, 0, DType::F64).unwrap();
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.9, 0.999));
        for _ in 0..300 {
            let x = store.tracked("x").unwrap();
            let g = x.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            opt.step(&store, &g).unwrap();
        }
        let x = store.tracked("x").unwrap().to_vec1::<f64>().unwrap();
        assert!(x.iter().all(|v| v.abs() < 0.05), "{x:?}");
    }

    #[test]
    fn first_step_moves_by_lr() {
        let specs = vec![ParamSpec::new("x", &[1], Init::Values(vec![1.0]))];
        let store = ParamStore::initialize(&specs, 0, DType::F64).unwrap();
        let mut opt = Adam::new(AdamConfig::new(0.01, 0.9, 0.999));
        let x = store.tracked("x").unwrap();
        let g = (x * 5.0).unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&store, &g).unwrap();
        let v = store.tracked("x").unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((v - 0.99).abs() < 1e-9);
    }
}
