use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::ParameterSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments per parameter plus the shared step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|(m, _)| m.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|(_, v)| v.as_slice())
    }

    /// `(name, first, second)` per parameter, sorted by name.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.moments.iter().map(|(n, (m, v))| (n.as_str(), m.as_slice(), v.as_slice()))
    }

    /// Restores a state captured with [`AdamState::moments`].
    pub fn from_moments(step: u64, moments: impl IntoIterator<Item = (String, Vec<f64>, Vec<f64>)>) -> Self {
        Self {
            moments: moments.into_iter().map(|(n, m, v)| (n, (m, v))).collect(),
            step,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay
/// (`p ← p·(1 − lr·wd)` before the moment step).
pub fn adam_step(
    params: &mut ParameterSet,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if let Some(name) = params.iter().find(|(_, t)| t.grad().is_none()).map(|(n, _)| n.to_string()) {
        return Err(Error::Precondition(format!(
            "parameter `{name}` has no gradient"
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);
    let decay = 1.0 - lr * weight_decay;
    for (name, tensor) in params.iter_mut() {
        let n = tensor.numel();
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let grad = tensor.grad().expect("checked above").to_vec();
        let data = tensor.data_mut();
        for i in 0..n {
            let gi = grad[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = data[i] * decay - lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

/// Global L2 norm over all gradients.
pub fn grad_norm(params: &ParameterSet) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `threshold`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParameterSet, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!(
            "clipping threshold must be positive, got {threshold}"
        )));
    }
    let norm = grad_norm(params);
    if norm > threshold {
        params.scale_grads(threshold / norm);
    }
    Ok(norm)
}
