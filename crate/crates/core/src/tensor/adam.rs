//! Adam optimizer over a [`ParamSet`].

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment slots, one pair per parameter tensor, plus the shared
/// step counter. Slots are keyed by parameter order, so the same `ParamSet`
/// must be passed to every step.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let m = params.ids().map(|id| vec![0.0; params.tensor(id).len()]).collect();
        let v = params.ids().map(|id| vec![0.0; params.tensor(id).len()]).collect();
        Adam { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. `grads` must align with the parameter
    /// order, one gradient vector per tensor.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradient vectors for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, id) in params.ids().enumerate() {
            if grads[i].len() != params.tensor(id).len() {
                return Err(Error::Contract(format!(
                    "gradient length {} for parameter {} of length {}",
                    grads[i].len(),
                    params.name(id),
                    params.tensor(id).len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (i, id) in params.ids().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.tensor_mut(id).values_mut();
            for ((pv, &g), (mv, vv)) in p.iter_mut().zip(&grads[i]).zip(m.iter_mut().zip(v.iter_mut())) {
                *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * g;
                *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
