use serde::{Deserialize, Serialize};

use super::{Module, NnError, Param};

/// Bias-corrected Adam moments for an ordered list of parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, params: &mut [&mut Param], lr: f64) -> Result<(), NnError> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(NnError::Shape {
                expected: self.m.iter().map(Vec::len).collect(),
                got: params.iter().map(|p| p.len()).collect(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.grad.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p.value.data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_module<M: Module + ?Sized>(&mut self, module: &mut M, lr: f64) -> Result<(), NnError> {
        let mut params = module.params_mut();
        self.update(&mut params, lr)
    }
}

/// `θ' ← τ θ + (1 − τ) θ'`, parameter by parameter.
pub fn soft_update<M: Module>(target: &mut M, online: &M, tau: f64) -> Result<(), NnError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(NnError::Argument(format!("tau {tau} outside (0, 1]")));
    }
    let src: Vec<&[f64]> = online.named_params().into_iter().map(|(_, p)| p.value.data.as_slice()).collect();
    let mut dst = target.params_mut();
    if src.len() != dst.len() || src.iter().zip(dst.iter()).any(|(s, d)| s.len() != d.len()) {
        return Err(NnError::Shape {
            expected: src.iter().map(|s| s.len()).collect(),
            got: dst.iter().map(|d| d.len()).collect(),
        });
    }
    for (d, s) in dst.iter_mut().zip(src) {
        for (t, &o) in d.value.data.iter_mut().zip(s) {
            *t = tau * o + (1.0 - tau) * *t;
        }
    }
    Ok(())
}
