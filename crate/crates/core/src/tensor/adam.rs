//! Adam with bias correction, one moment pair per named parameter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Optimizer state. Moments are created the first time a parameter is
/// stepped and persist afterwards.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.state.get(name)
    }

    /// One update of `param` from `grad` at learning rate `lr`.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: param.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
        let n = param.numel();
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        if st.m.len() != n {
            return Err(Error::Shape {
                op: "adam_step state",
                left: param.shape().to_vec(),
                right: vec![st.m.len()],
            });
        }
        adam_update(&self.config, st, param.data_mut(), grad.data(), lr);
        Ok(())
    }
}

pub(crate) fn adam_update(cfg: &AdamConfig, st: &mut Moments, p: &mut [f64], g: &[f64], lr: f64) {
    st.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(st.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(st.t as i32);
    for i in 0..p.len() {
        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g[i];
        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = st.m[i] / bc1;
        let v_hat = st.v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut adam = Adam::default();
        adam.config = AdamConfig::default();
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        adam.step("w", &mut p, &Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), 0.1)
            .unwrap();
        let before = p.clone();
        let m_before = adam.moments("w").unwrap().m.clone();
        adam.step("w", &mut p, &Tensor::zeros(&[2]), 0.1).unwrap();
        let m_after = &adam.moments("w").unwrap().m;
        for (a, b) in m_after.iter().zip(&m_before) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
        // the first moment still carries momentum, so only check a fresh state
        let mut fresh = Adam::new(AdamConfig::default());
        let mut q = before.clone();
        fresh.step("w", &mut q, &Tensor::zeros(&[2]), 0.1).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = Tensor::scalar(0.0);
        adam.step("p", &mut p, &Tensor::scalar(1.0), 0.1).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert!((p.item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = Tensor::scalar(0.0);
        for _ in 0..200 {
            let g = Tensor::scalar(2.0 * (p.item() - 3.0));
            adam.step("p", &mut p, &g, 0.1).unwrap();
        }
        assert!((p.item() - 3.0).abs() < 1e-2, "p = {}", p.item());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut adam = Adam::default();
        let mut p = Tensor::scalar(0.0);
        let err = adam
            .step("proto.bank", &mut p, &Tensor::scalar(f64::NAN), 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("proto.bank"));
    }
}
