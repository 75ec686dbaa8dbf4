//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// First/second moment buffers per parameter plus the shared step counter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<ParamId, Moments>,
}

/// One bias-corrected Adam update of a flat parameter buffer. `step` is the
/// 1-based step count after incrementing.
pub fn adam_update(param: &mut [f64], grad: &[f64], moments: &mut Moments, step: u64, cfg: &AdamConfig) -> Result<()> {
    if param.len() != grad.len() || moments.m.len() != param.len() || moments.v.len() != param.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_update",
            lhs: vec![param.len()],
            rhs: vec![grad.len()],
        });
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        let m = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        param[i] -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: AdamState::default(),
        }
    }

    /// Advances the step counter and updates exactly the parameters listed in
    /// `grads`; everything else in `store` is left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        self.state.step += 1;
        let step = self.state.step;
        for (id, g) in grads {
            let param = store.get_mut(*id);
            let n = param.len();
            if g.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_update",
                    lhs: param.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            let moments = self.state.moments.entry(*id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            adam_update(param.data_mut(), g, moments, step, &self.config)?;
        }
        Ok(())
    }
}
