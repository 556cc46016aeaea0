use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::params::Params;
use crate::numerics::tape::Gradients;
use crate::numerics::tensor::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(base_lr: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. Parameters with no
    /// entry in `grads` are left alone.
    pub fn step(&mut self, params: &mut Params, grads: &Gradients, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .map_err(|_| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for k in 0..g.len() {
                let gk = g.data()[k];
                let mk = b1 * m.data()[k] + (1.0 - b1) * gk;
                let vk = b2 * v.data()[k] + (1.0 - b2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let m_hat = mk / bc1;
                let v_hat = vk / bc2;
                p.data_mut()[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base_lr` at step 0 to zero at `total_steps`.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::invalid(format!(
            "cosine_lr: step {step} outside 0..={total_steps}"
        )));
    }
    Ok(base_lr * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> Params {
        let mut p = Params::new();
        p.insert(name, Tensor::scalar(v));
        p
    }

    fn grad(name: &str, v: f64) -> Gradients {
        let mut g = Gradients::new();
        g.insert(name.to_string(), Tensor::scalar(v));
        g
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = single("w", 0.7);
        let mut adam = AdamState::new(0.1);
        adam.step(&mut p, &grad("w", 0.0), 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().item().unwrap(), 0.7);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut p = single("w", 0.0);
        let mut adam = AdamState::new(0.01);
        let mut prev = 0.0;
        for _ in 0..50 {
            adam.step(&mut p, &grad("w", 3.0), 0.01).unwrap();
            let w = p.get("w").unwrap().item().unwrap();
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn quadratic_converges() {
        // Scalar simulation of f(w) = w^2 from w = 1.
        let mut p = single("w", 1.0);
        let mut adam = AdamState::new(1e-2);
        for _ in 0..500 {
            let w = p.get("w").unwrap().item().unwrap();
            adam.step(&mut p, &grad("w", 2.0 * w), 1e-2).unwrap();
        }
        assert!(p.get("w").unwrap().item().unwrap().abs() < 1e-2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = single("w", 1.0);
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::zeros(&[1, 2]));
        let err = AdamState::new(0.1).step(&mut p, &g, 0.1).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.3, 0, 100).unwrap(), 0.3);
        assert!(cosine_lr(0.3, 100, 100).unwrap().abs() < 1e-17);
        assert!((cosine_lr(0.3, 50, 100).unwrap() - 0.15).abs() < 1e-15);
        assert!(cosine_lr(0.3, 101, 100).is_err());
    }
}
