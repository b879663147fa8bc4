//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
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

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

/// Optimizer state: first/second moment tensors mirroring each parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        AdamState {
            config,
            step_count: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One bias-corrected update of every parameter in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::ShapeMismatch {
                context: "adam_step parameter count",
                expected: vec![self.first.len()],
                got: vec![params.len(), grads.len()],
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            if param.shape() != grad.shape() {
                return Err(Error::ShapeMismatch {
                    context: "adam_step gradient shape",
                    expected: param.shape().to_vec(),
                    got: grad.shape().to_vec(),
                });
            }
            let p = param.data_mut();
            let g = grad.data();
            let m = m.data_mut();
            let v = v.data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let orig = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut state = AdamState::new(AdamConfig::default(), &[&orig]);
        state.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, orig);
    }

    #[test]
    fn first_step_moves_by_about_lr_regardless_of_gradient_scale() {
        // Closed form: after one step m_hat = g, v_hat = g², so the update is
        // lr·g/(|g|+eps) ≈ lr·sign(g).
        for &g_val in &[1e-3, 1.0, 250.0] {
            let mut p = Tensor::zeros(&[2]);
            let snapshot = p.clone();
            let g = Tensor::filled(&[2], g_val);
            let cfg = AdamConfig::with_lr(0.001);
            let mut state = AdamState::new(cfg, &[&snapshot]);
            state.step(&mut [&mut p], &[&g]).unwrap();
            for &v in p.data() {
                assert!(
                    (v.abs() - 0.001).abs() < 1e-6,
                    "step size {v} for gradient {g_val}"
                );
            }
        }
    }

    #[test]
    fn steps_are_deterministic_from_identical_state() {
        let run = || {
            let mut p = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
            let snapshot = p.clone();
            let mut state = AdamState::new(AdamConfig::default(), &[&snapshot]);
            for k in 1..=5 {
                let g = Tensor::filled(&[2], 0.1 * k as f64);
                state.step(&mut [&mut p], &[&g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_mismatched_gradient_shape() {
        let mut p = Tensor::zeros(&[3]);
        let snapshot = p.clone();
        let g = Tensor::zeros(&[2]);
        let mut state = AdamState::new(AdamConfig::default(), &[&snapshot]);
        assert!(state.step(&mut [&mut p], &[&g]).is_err());
    }
}
