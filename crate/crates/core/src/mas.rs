//! MAS-style weight regularization.
//!
//! Importance is the mean absolute gradient of the squared L2 norm of each
//! tower's pre-normalization output: examples drive the input-tower entries,
//! the task's class ids drive the class-tower entries. Fresh importance is
//! max-normalized into [0, 1] and folded into Omega by exponential moving
//! average; the quadratic penalty reads Omega only through the current
//! selection mask.

use crate::bitset::Bitset;
use crate::error::{Result, SpclError};
use crate::model::{Gradients, Model, TowerTag};
use crate::tensor::Tensor2;

#[derive(Clone, Debug)]
pub struct MasState {
    /// Per-parameter importance over the eligible set, zero elsewhere.
    pub omega: Vec<f64>,
    /// Parameter snapshot taken before any step of the current task.
    pub anchor: Vec<f64>,
    pub alpha: f64,
    pub lambda: f64,
}

impl MasState {
    pub fn new(param_len: usize, alpha: f64, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(SpclError::Argument(format!("alpha {alpha} outside [0, 1]")));
        }
        if lambda < 0.0 {
            return Err(SpclError::Argument(format!("lambda {lambda} must be nonnegative")));
        }
        Ok(MasState { omega: vec![0.0; param_len], anchor: vec![0.0; param_len], alpha, lambda })
    }

    pub fn snapshot_anchor(&mut self, theta: &[f64]) {
        self.anchor.clear();
        self.anchor.extend_from_slice(theta);
    }
}

/// Mean absolute gradient of ‖tower output‖² per eligible parameter.
///
/// Per-example gradients are computed one row at a time: the output-norm
/// objective is not batch-coupled, and |·| must be applied before averaging.
pub fn compute_raw_importance(
    model: &Model,
    features: &Tensor2,
    class_ids: &[u32],
    eligible: &Bitset,
) -> Result<Vec<f64>> {
    if features.rows() == 0 {
        return Err(SpclError::Argument("importance needs at least one example".into()));
    }
    if class_ids.is_empty() {
        return Err(SpclError::Argument("importance needs at least one class id".into()));
    }
    let mut raw = vec![0.0; model.param_len()];
    let mut tower_of = vec![TowerTag::Input; model.param_len()];
    for e in model.registry().entries() {
        tower_of[e.offset..e.offset + e.len].fill(e.tower);
    }
    let input_eligible: Vec<usize> =
        eligible.ones().filter(|&i| tower_of[i] == TowerTag::Input).collect();
    let class_eligible: Vec<usize> =
        eligible.ones().filter(|&i| tower_of[i] == TowerTag::Class).collect();

    for r in 0..features.rows() {
        let x = features.gather_rows(&[r]);
        let (pre, cache) = model.input_tower_forward(&x)?;
        let mut d = pre.clone();
        for v in d.data_mut() {
            *v *= 2.0;
        }
        let mut grads = Gradients::zeros(model.param_len());
        model.input_tower_backward(cache, &d, &mut grads)?;
        for &i in &input_eligible {
            raw[i] += grads.flat[i].abs();
        }
    }
    for &i in &input_eligible {
        raw[i] /= features.rows() as f64;
    }

    for &c in class_ids {
        let (pre, cache) = model.class_tower_forward(&[c])?;
        let mut d = pre.clone();
        for v in d.data_mut() {
            *v *= 2.0;
        }
        let mut grads = Gradients::zeros(model.param_len());
        model.class_tower_backward(cache, &d, &mut grads)?;
        for &i in &class_eligible {
            raw[i] += grads.flat[i].abs();
        }
    }
    for &i in &class_eligible {
        raw[i] /= class_ids.len() as f64;
    }

    Ok(raw)
}

/// Max-normalize the fresh importance, then EMA into the previous Omega.
pub fn update_importance(omega_prev: &[f64], raw: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if omega_prev.len() != raw.len() {
        return Err(SpclError::Dimension(format!(
            "omega {} vs raw {}",
            omega_prev.len(),
            raw.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SpclError::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    if raw.iter().any(|&v| v < 0.0) {
        return Err(SpclError::Argument("raw importance must be nonnegative".into()));
    }
    let max = raw.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
    Ok(omega_prev
        .iter()
        .zip(raw)
        .map(|(&prev, &r)| (1.0 - alpha) * prev + alpha * r * scale)
        .collect())
}

/// Quadratic drift penalty over the selected indices. Returns the loss and
/// adds the penalty gradient into `grad`.
pub fn penalty_and_grad(
    theta: &[f64],
    mas: &MasState,
    mask: &Bitset,
    grad: &mut [f64],
) -> Result<f64> {
    if theta.len() != mas.omega.len() || theta.len() != grad.len() || theta.len() != mask.len() {
        return Err(SpclError::Dimension(format!(
            "penalty: theta {}, omega {}, grad {}, mask {}",
            theta.len(),
            mas.omega.len(),
            grad.len(),
            mask.len()
        )));
    }
    let mut loss = 0.0;
    for i in mask.ones() {
        let drift = theta[i] - mas.anchor[i];
        loss += mas.lambda * mas.omega[i] * drift * drift;
        grad[i] += 2.0 * mas.lambda * mas.omega[i] * drift;
    }
    Ok(loss)
}
