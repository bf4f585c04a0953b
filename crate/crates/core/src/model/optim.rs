//! AdamW with decoupled weight decay and a linear warmup / linear decay schedule.

use serde::{Deserialize, Serialize};

use super::params::{ParamBuffer, ParamLayout};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Learning rate for the 0-based `step`: `base * (step + 1) / warmup` during
    /// warmup, then linear decay towards zero at `total_steps`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_span = self.total_steps.saturating_sub(self.warmup_steps);
        if decay_span == 0 {
            return self.base_lr;
        }
        let remaining = self.total_steps.saturating_sub(step) as f64;
        self.base_lr * remaining / decay_span as f64
    }
}

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
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ParamBuffer,
    pub second_moment: ParamBuffer,
    /// Number of updates applied so far.
    pub step: usize,
}

impl OptimizerState {
    pub fn new(layout: &ParamLayout) -> Self {
        Self::with_len(layout.total)
    }

    pub fn with_len(n: usize) -> Self {
        Self {
            first_moment: ParamBuffer { data: vec![0.0; n] },
            second_moment: ParamBuffer { data: vec![0.0; n] },
            step: 0,
        }
    }
}

/// One AdamW update of `params` in place; returns the learning rate used.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
    schedule: &LrSchedule,
) -> f64 {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.first_moment.data.len());
    let lr = schedule.lr(state.step);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.data.iter_mut())
        .zip(state.second_moment.data.iter_mut())
    {
        *p *= decay;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    lr
}
