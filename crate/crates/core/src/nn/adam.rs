use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{GradientSet, Mlp};
use crate::error::{invalid, QgtError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Array1<f64>>,
    second: Vec<Array1<f64>>,
}

impl AdamState {
    pub fn new(model: &Mlp, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|&n| Array1::zeros(n)).collect(),
            second: shapes.iter().map(|&n| Array1::zeros(n)).collect(),
        }
    }

    /// Bias-corrected Adam update. A non-finite gradient aborts before any
    /// parameter or moment is touched.
    pub fn step(&mut self, model: &mut Mlp, grads: &GradientSet) -> Result<()> {
        if grads.tensors.len() != self.first.len()
            || grads.tensors.iter().zip(&self.first).any(|(g, m)| g.len() != m.len())
        {
            return invalid("gradient set does not match the optimizer state");
        }
        if !grads.is_finite() {
            return Err(QgtError::TrainingDiverged("non-finite gradient".into()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let params = model.param_slices_mut();
        for (((p, g), m), v) in params.into_iter().zip(&grads.tensors).zip(&mut self.first).zip(&mut self.second) {
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
