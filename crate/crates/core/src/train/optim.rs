// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, Weights};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates with the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Weights<Tensor>,
    pub v: Weights<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = params.map(|p| Tensor::zeros(p.shape()));
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update on a flat parameter slice. `t` is the
/// 1-based step number.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Applies one Adam step to every parameter. A non-finite gradient aborts
/// the step before anything is modified.
pub fn adam_step(params: &mut ModelParams, grads: &Weights<Tensor>, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    for (name, g) in grads.named() {
        if let Some(index) = g.first_non_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of {name}"),
                index,
            });
        }
    }
    state.t += 1;
    let t = state.t;
    let gs = grads.named();
    let ms = state.m.values_mut();
    let vs = state.v.values_mut();
    for (((p, (_, g)), m), v) in params.values_mut().into_iter().zip(gs).zip(ms).zip(vs) {
        adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), t, cfg);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = vec![0.5, -1.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &AdamConfig::default());
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after one step, so the update is lr·g/(|g| + eps).
        let cfg = AdamConfig::default();
        for g in [0.3, -2.0, 17.0] {
            let mut p = vec![1.0];
            let (mut m, mut v) = (vec![0.0], vec![0.0]);
            adam_update(&mut p, &[g], &mut m, &mut v, 1, &cfg);
            let step = 1.0 - p[0];
            let want = cfg.learning_rate * g / (g.abs() + cfg.eps);
            assert!((step - want).abs() < 1e-15);
            assert!((step.abs() - cfg.learning_rate).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_runs_match() {
        let run = || {
            let mut p = vec![0.1, 0.2, 0.3];
            let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
            for t in 1..=50 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x - (t as f64).sin()).collect();
                adam_update(&mut p, &g, &mut m, &mut v, t, &AdamConfig::default());
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let cfg = AdamConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let mut p = vec![0.7];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_update(&mut p, &[3.0], &mut m, &mut v, 1, &cfg);
        assert_eq!(p, vec![0.7]);
        assert!(cfg.validate().is_ok());
        assert!(AdamConfig { learning_rate: -1.0, ..cfg }.validate().is_err());
    }
}
