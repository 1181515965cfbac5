use serde::{Deserialize, Serialize};

use super::ParamMut;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamSlot {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update of `params` in place. `step` is the
/// 1-based step count after incrementing.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    slot: &mut AdamSlot,
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || slot.m.len() != params.len() || slot.v.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            (params.len(), grads.len()),
            (slot.m.len(), slot.v.len()),
        ));
    }
    if step == 0 {
        return Err(Error::InvalidArgument("adam step counter starts at 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
        slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = slot.m[i] / bc1;
        let v_hat = slot.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over an ordered parameter list. Moment buffers are created lazily on
/// the first step and must keep the same layout afterwards.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [ParamMut<'_>]) -> Result<()> {
        if self.slots.is_empty() {
            self.slots = params.iter().map(|p| AdamSlot::zeros(p.value.len())).collect();
        }
        if self.slots.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {}",
                self.slots.len(),
                params.len()
            )));
        }
        self.step += 1;
        for (p, slot) in params.iter_mut().zip(&mut self.slots) {
            adam_step(p.value, p.grad, slot, self.step, &self.config)?;
        }
        Ok(())
    }
}
