//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers shaped like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads, cfg: &AdamWConfig) -> Result<()> {
        if grads.version != params.version() {
            return Err(Error::StaleTape {
                tape: grads.version,
                params: params.version(),
            });
        }
        if grads.tensors.len() != params.len() {
            return Err(Error::Dimension {
                expected: params.len(),
                got: grads.tensors.len(),
            });
        }
        let bad: Vec<usize> = grads
            .tensors
            .iter()
            .enumerate()
            .filter(|(_, g)| g.iter().any(|x| !x.is_finite()))
            .map(|(i, _)| i)
            .collect();
        if !bad.is_empty() {
            return Err(Error::NonFinite {
                what: "gradient tensors".into(),
                indices: bad,
            });
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let decay = 1.0 - cfg.lr * cfg.weight_decay;
        for (i, g) in grads.tensors.iter().enumerate() {
            let m = self.m.get_mut(i);
            let v = self.v.get_mut(i);
            let p = params.get_mut(i);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *p *= decay;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
        }
        Ok(())
    }
}
