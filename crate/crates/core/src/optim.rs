//! Adam with optional global-norm gradient clipping.

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::params::{ParamStore, VarSet};

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn new(lr: f64, clip_norm: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
        }
    }
}

pub struct Adam {
    pub config: AdamConfig,
    pub step: usize,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

/// Euclidean norm over all gradient entries.
pub fn global_norm(grads: &Gradients) -> Result<f64> {
    let mut total = 0.0;
    for g in grads.values() {
        total += g.to_dtype(candle_core::DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(total.sqrt())
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update to every variable that has a gradient and returns
    /// the pre-clipping gradient norm.
    pub fn step(&mut self, vars: &VarSet, grads: &Gradients) -> Result<f64> {
        let norm = global_norm(grads)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm} at optimizer step {}", self.step)));
        }
        let scale = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var) in vars.iter() {
            let Some(g) = grads.get(name) else { continue };
            // Gradients can still reference the forward graph; detaching keeps
            // the moments from holding every step's activations alive.
            let g = (g.detach() * scale)?;
            let m = match self.first.get(name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let update = ((&m / bias1)? / ((&v / bias2)?.sqrt()? + c.eps)?)?;
            var.set(&(var.as_tensor() - (update * c.lr)?)?)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(norm)
    }

    /// First and second moments as stores, for checkpointing.
    pub fn moments(&self) -> (ParamStore, ParamStore) {
        let collect = |map: &BTreeMap<String, Tensor>| {
            let mut s = ParamStore::new();
            for (k, t) in map {
                s.insert(k.clone(), t.clone());
            }
            s
        };
        (collect(&self.first), collect(&self.second))
    }
}
