//! Masked AdamW and the cosine-annealing-with-warmup schedule.
//!
//! The masked step is the freeze mechanism of the whole engine: indices
//! outside the mask see no moment update and no weight decay, so their
//! parameter and optimizer state stay bitwise unchanged for any number of
//! steps.

use crate::bitset::Bitset;
use crate::error::{Result, SpclError};

#[derive(Clone, Debug)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamWState {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        AdamWState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }
}

/// One decoupled-weight-decay AdamW step applied only to masked-in indices.
pub fn adamw_masked_step(
    theta: &mut [f64],
    grad: &[f64],
    mask: &Bitset,
    state: &mut AdamWState,
    lr: f64,
) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != mask.len() || theta.len() != state.m.len() {
        return Err(SpclError::Dimension(format!(
            "adamw_masked_step: theta {}, grad {}, mask {}, state {}",
            theta.len(),
            grad.len(),
            mask.len(),
            state.m.len()
        )));
    }
    if lr < 0.0 {
        return Err(SpclError::Argument("learning rate must be nonnegative".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in mask.ones() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + state.epsilon) + state.weight_decay * theta[i]);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_lr: f64,
}

impl LrSchedule {
    /// Warmup defaults to 10% of the total step budget.
    pub fn with_warmup_fraction(base_lr: f64, total_steps: usize, fraction: f64, min_lr: f64) -> Self {
        let warmup_steps = ((total_steps as f64) * fraction).round() as usize;
        LrSchedule { base_lr, warmup_steps, total_steps, min_lr }
    }
}

/// Linear ramp to base_lr over the warmup, then cosine annealing to min_lr.
pub fn cosine_warmup_lr(step: usize, sched: &LrSchedule) -> Result<f64> {
    if step > sched.total_steps {
        return Err(SpclError::ScheduleExhausted { step, total: sched.total_steps });
    }
    if step < sched.warmup_steps {
        return Ok(sched.base_lr * step as f64 / sched.warmup_steps as f64);
    }
    let span = sched.total_steps - sched.warmup_steps;
    if span == 0 {
        return Ok(sched.base_lr);
    }
    let progress = (step - sched.warmup_steps) as f64 / span as f64;
    Ok(sched.min_lr
        + 0.5 * (sched.base_lr - sched.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
