//! Optimizers: AdamW with decoupled weight decay, plain SGD, and a cosine
//! learning-rate schedule. State is keyed by parameter name so frozen
//! tensors never acquire moments.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

/// AdamW with decoupled weight decay:
/// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, moments: HashMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over `(name, param, grad)` triples at learning rate `lr`
    /// (already scheduled by the caller).
    pub fn step(&mut self, lr: f64, triples: &mut [(&str, &mut Tensor, &Tensor)]) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for (name, param, grad) in triples {
            if param.shape() != grad.shape() {
                return Err(Error::dim(format!(
                    "optimizer_step: param `{name}` {:?} vs grad {:?}",
                    param.shape(),
                    grad.shape()
                )));
            }
            let slot = self.moments.entry((*name).to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(param.shape()),
                v: Tensor::zeros(param.shape()),
            });
            if slot.m.shape() != param.shape() {
                return Err(Error::dim(format!(
                    "optimizer_step: stale moments for `{name}`"
                )));
            }
            let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
            for i in 0..param.numel() {
                let g = grad.data()[i];
                let m = b1 * slot.m.data()[i] + (1.0 - b1) * g;
                let v = b2 * slot.v.data()[i] + (1.0 - b2) * g * g;
                slot.m.data_mut()[i] = m;
                slot.v.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let p = param.data()[i];
                param.data_mut()[i] =
                    p - lr * m_hat / (v_hat.sqrt() + self.cfg.eps) - lr * self.cfg.weight_decay * p;
            }
        }
        Ok(())
    }
}

/// Plain SGD, optionally with momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: HashMap::new() }
    }

    pub fn step(&mut self, triples: &mut [(&str, &mut Tensor, &Tensor)]) -> Result<()> {
        for (name, param, grad) in triples {
            if param.shape() != grad.shape() {
                return Err(Error::dim(format!(
                    "optimizer_step: param `{name}` {:?} vs grad {:?}",
                    param.shape(),
                    grad.shape()
                )));
            }
            if self.momentum == 0.0 {
                param.axpy(-self.lr, grad)?;
            } else {
                let vel = self
                    .velocity
                    .entry((*name).to_string())
                    .or_insert_with(|| Tensor::zeros(param.shape()));
                for i in 0..param.numel() {
                    let v = self.momentum * vel.data()[i] + grad.data()[i];
                    vel.data_mut()[i] = v;
                    param.data_mut()[i] -= self.lr * v;
                }
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base_lr` to zero over `total` steps.
pub fn cosine_lr(base_lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * t).cos())
}
