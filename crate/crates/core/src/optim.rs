//! Adam with a cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    /// The schedule decays to `lr * min_lr_fraction` at the last step.
    pub min_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, min_lr_fraction: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return Err(Error::Config(format!("min_lr_fraction must lie in [0, 1], got {}", self.min_lr_fraction)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine decay from `lr` at step 0 to `lr * min_lr_fraction` at `total`.
pub fn cosine_lr(config: &AdamConfig, step: u64, total: u64) -> f64 {
    let progress = if total == 0 { 0.0 } else { (step as f64 / total as f64).min(1.0) };
    let floor = config.lr * config.min_lr_fraction;
    floor + 0.5 * (config.lr - floor) * (1.0 + (PI * progress).cos())
}

/// First and second moments per parameter plus the update count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec()))).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    /// One update with learning rate `lr`. Parameters without a gradient are
    /// left untouched.
    pub fn step(&mut self, config: &AdamConfig, lr: f64, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>) {
        self.t += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (config.eps * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (name, g) in grads {
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            let p = params.get_mut(name).expect("known parameter");
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= step * *mv / (vv.sqrt() + eps);
            }
        }
    }
}
