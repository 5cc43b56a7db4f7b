//! Adam with bias correction and a step-decay learning-rate schedule.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// `base_lr / decay_factor^floor(step / decay_every)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, decay_factor: f64, decay_every: usize) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate must be positive, got {base_lr}")));
        }
        if !(decay_factor > 1.0 && decay_factor.is_finite()) {
            return Err(Error::InvalidInput(format!("decay factor must exceed 1, got {decay_factor}")));
        }
        if decay_every == 0 {
            return Err(Error::InvalidInput("decay interval must be at least 1".into()));
        }
        Ok(LrSchedule { base_lr, decay_factor, decay_every })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.base_lr / self.decay_factor.powi((step / self.decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Completed steps.
    pub step_count: usize,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step_count: 0 }
    }

    /// One update of `params` in place; the learning rate is taken from
    /// `schedule` at the current step count. Entries where `mask` is false
    /// keep both their value and their moments.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], schedule: &LrSchedule, mask: Option<&[bool]>) -> Result<()> {
        let n = self.m.len();
        for len in [params.len(), grad.len(), mask.map_or(n, <[bool]>::len)] {
            if len != n {
                return Err(Error::LengthMismatch { expected: n, got: len });
            }
        }
        let lr = schedule.lr_at(self.step_count);
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for i in 0..n {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let g = grad[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
        Ok(())
    }
}
