//! Adam optimizer with bias correction.

use std::collections::HashMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Optimizer state: first/second moment per parameter (keyed by tensor id)
/// plus the shared step counter and hyperparameters.
#[derive(Debug)]
pub struct AdamState<E: Scalar = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<u64, (Vec<E>, Vec<E>)>,
}

impl<E: Scalar> AdamState<E> {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over `params`. Every parameter must carry a gradient;
    /// gradients are left untouched (the caller resets them).
    pub fn step(&mut self, params: &[Tensor<E>]) -> Result<()> {
        for p in params {
            if p.grad().is_none() {
                return Err(Error::contract(format!(
                    "adam_step: parameter {:?} (id {}) has no gradient",
                    p.shape(),
                    p.id()
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for p in params {
            let grad = p.grad().expect("checked above");
            let (m, v) = self
                .moments
                .entry(p.id())
                .or_insert_with(|| (vec![E::zero(); p.numel()], vec![E::zero(); p.numel()]));
            p.with_data_mut(|data| {
                for i in 0..data.len() {
                    let g = grad[i].to_f64();
                    let mi = b1 * m[i].to_f64() + (1.0 - b1) * g;
                    let vi = b2 * v[i].to_f64() + (1.0 - b2) * g * g;
                    m[i] = E::from_f64(mi);
                    v[i] = E::from_f64(vi);
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    let delta = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    data[i] = E::from_f64(data[i].to_f64() - delta);
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::param(&[1], vec![v]).unwrap()
    }

    #[test]
    fn first_step_has_unit_normalized_magnitude() {
        // p = 1, grad = 1, lr = 0.1: bias-corrected m_hat = v_hat = 1, so the
        // update is lr / (1 + eps) and p lands at 0.9.
        let p = scalar_param(1.0);
        p.accumulate_grad(&[1.0]);
        let mut adam = AdamState::new(0.1);
        adam.step(std::slice::from_ref(&p)).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-9, "{}", p.data()[0]);
        assert_eq!(adam.step_count(), 1);
        // Gradient left in place for the caller to reset.
        assert_eq!(p.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn zero_grad_leaves_fresh_param_unchanged() {
        let p = scalar_param(2.5);
        p.accumulate_grad(&[0.0]);
        let mut adam = AdamState::new(0.1);
        adam.step(std::slice::from_ref(&p)).unwrap();
        assert_eq!(p.data()[0], 2.5);
    }

    #[test]
    fn missing_grad_is_a_contract_violation() {
        let p = scalar_param(1.0);
        let mut adam = AdamState::<f64>::new(0.1);
        assert!(adam.step(std::slice::from_ref(&p)).is_err());
    }

    #[test]
    fn descends_a_quadratic_from_any_start() {
        for start in [3.0, -1.7, 0.4] {
            let p = scalar_param(start);
            let mut adam = AdamState::new(0.05);
            let loss = |x: f64| x * x;
            let mut prev = loss(start);
            for _ in 0..2 {
                let x = p.data()[0];
                p.zero_grad();
                p.accumulate_grad(&[2.0 * x]);
                adam.step(std::slice::from_ref(&p)).unwrap();
            }
            let now = loss(p.data()[0]);
            assert!(now < prev, "loss {prev} -> {now} from start {start}");
            prev = now;
            let _ = prev;
        }
    }
}
