//! Adam and the reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { config, m: zeros.clone(), v: zeros, step: 0 }
    }

    /// One bias-corrected update. A non-finite or misshapen gradient aborts the
    /// step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Training(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::Training(format!("gradient shape {:?} for parameter {} of shape {:?}", g.shape(), store.name(id), store.get(id).shape())));
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient for {}; step aborted", store.name(id))));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let theta = store.get_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                theta[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    /// Required gain over the best value to count as progress.
    pub threshold: f64,
    pub best: Option<f64>,
    pub stale: usize,
}

impl Plateau {
    pub fn new(lr: f64, patience: usize, factor: f64, min_lr: f64) -> Self {
        Self { lr, patience, factor, min_lr, threshold: 1e-4, best: None, stale: 0 }
    }

    /// Records one dev accuracy and returns the learning rate to use next.
    pub fn observe(&mut self, metric: f64) -> f64 {
        match self.best {
            Some(best) if metric <= best + self.threshold => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.lr = (self.lr * self.factor).max(self.min_lr).min(self.lr);
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(metric);
                self.stale = 0;
            }
        }
        self.lr
    }
}
