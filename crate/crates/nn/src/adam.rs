//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum AdamError {
    #[error("non-finite gradient for parameter {0:?}")]
    NonFiniteGradient(String),
    #[error("gradient shape {got:?} does not match parameter {name:?} shape {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment estimates plus the shared step count.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one bias-corrected update. Parameters without an entry in
    /// `grads` are treated as zero-gradient (their moments still decay).
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), AdamError> {
        for (name, grad) in grads {
            if !grad.is_finite() {
                return Err(AdamError::NonFiniteGradient(name.clone()));
            }
            if params.contains(name) && grad.shape() != params.get(name).shape() {
                return Err(AdamError::ShapeMismatch {
                    name: name.clone(),
                    got: grad.shape().to_vec(),
                    want: params.get(name).shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let param = params.get_mut(&name);
            let zero = Tensor::zeros(param.shape());
            let grad = grads.get(&name).unwrap_or(&zero);
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            for i in 0..param.numel() {
                let g = grad.data()[i];
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                param.data_mut()[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
