//! Adam and the triangular cyclical learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = |t: &Tensor<T>| Tensor::zeros(t.shape());
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters, {} gradients, {} optimiser slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pk, &gk), mk), vk) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mk = b1 * *mk + (T::one() - b1) * gk;
            *vk = b2 * *vk + (T::one() - b2) * gk * gk;
            let mhat = *mk / c1;
            let vhat = *vk / c2;
            *pk -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Triangular schedule: `base → max` over `step_size` steps, then back.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CyclicalLrSchedule {
    pub base_lr: f64,
    pub max_lr: f64,
    pub step_size: u64,
}

impl CyclicalLrSchedule {
    pub const DEFAULT_BASE: f64 = 1e-7;
    pub const DEFAULT_MAX: f64 = 1e-2;

    pub fn new(base_lr: f64, max_lr: f64, step_size: u64) -> Result<Self> {
        let s = Self {
            base_lr,
            max_lr,
            step_size,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.step_size == 0 || !(self.base_lr > 0.0 && self.base_lr <= self.max_lr) || !self.max_lr.is_finite() {
            return Err(Error::Config(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let pos = step % (2 * self.step_size);
        let x = if pos <= self.step_size {
            pos
        } else {
            2 * self.step_size - pos
        };
        self.base_lr + (self.max_lr - self.base_lr) * (x as f64 / self.step_size as f64)
    }
}
