use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update at step `t >= 1`, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) {
    debug_assert!(t >= 1);
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Moment estimates for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(|p| p.len()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Advances the step counter and updates every tensor.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        cfg: &AdamConfig,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(shape_err!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            ));
        }
        self.t += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(shape_err!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
            adam_step(
                p.data_mut(),
                g.data(),
                &mut self.m[i],
                &mut self.v[i],
                self.t,
                cfg,
            );
        }
        Ok(())
    }
}
