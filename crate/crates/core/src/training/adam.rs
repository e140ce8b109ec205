use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// `[t, m.., v..]` as one flat vector, for checkpoint blobs.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = vec![self.t as f64];
        out.extend(self.m.iter().flatten());
        out.extend(self.v.iter().flatten());
        out
    }

    /// Inverse of [`Self::to_flat`] for parameters of the given lengths.
    pub fn from_flat(flat: &[f64], lengths: &[usize]) -> Result<Self> {
        let total: usize = lengths.iter().sum();
        if flat.len() != 1 + 2 * total || !(flat[0] >= 0.0) || flat[0].fract() != 0.0 {
            return Err(TrainError::Config(format!(
                "optimizer state has {} values, expected {}",
                flat.len(),
                1 + 2 * total
            )));
        }
        let split = |mut rest: &[f64]| {
            lengths
                .iter()
                .map(|&n| {
                    let (head, tail) = rest.split_at(n);
                    rest = tail;
                    head.to_vec()
                })
                .collect::<Vec<_>>()
        };
        Ok(Self {
            t: flat[0] as u64,
            m: split(&flat[1..1 + total]),
            v: split(&flat[1 + total..]),
        })
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Config(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TrainError::Config(format!(
                "gradient shape {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient);
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let data = p.data_mut();
        for j in 0..data.len() {
            let gj = g.data()[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            data[j] -= lr * mh / (vh.sqrt() + cfg.epsilon);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient);
        }
    }
    Ok(())
}
