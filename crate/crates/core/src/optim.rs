//! Adam optimizer with bias correction.

use crate::autodiff::Params;
use crate::error::{Error, Result};

/// Per-parameter moment estimates plus the shared step counter and
/// hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Steps taken so far; increments by exactly 1 per `step`.
    pub t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &Params, lr: f64) -> Self {
        Self::with_hyper(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &Params, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let first = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let second = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState { lr, beta1, beta2, epsilon, t: 0, first, second }
    }

    /// One bias-corrected Adam update from the gradients currently held by
    /// `params`. Every parameter must carry a gradient buffer.
    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (name, tensor)) in params.iter_mut_indexed() {
            let grad = tensor.grad.as_ref().ok_or_else(|| {
                Error::Usage(format!("adam step: parameter `{name}` has no gradient"))
            })?;
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (((p, g), mi), vi) in tensor.values.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn single_param(value: f64) -> Params {
        let mut p = Params::new();
        p.add("p", Tensor::new(&[1], vec![value], true).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = single_param(1.5);
        params.zero_grad();
        let mut adam = AdamState::new(&params, 1e-3);
        adam.step(&mut params).unwrap();
        assert_eq!(params.iter().next().unwrap().1.values[0], 1.5);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn first_step_matches_hand_evaluated_update() {
        // m_hat = v_hat = 1 after one unit-gradient step, so the update is
        // lr / (1 + eps).
        let mut params = single_param(1.0);
        params.zero_grad();
        params.iter_mut_indexed().next().unwrap().1 .1.grad = Some(vec![1.0]);
        let mut adam = AdamState::new(&params, 1e-3);
        adam.step(&mut params).unwrap();
        let got = params.iter().next().unwrap().1.values[0];
        let want = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((got - want).abs() < 1e-15, "got {got}, want {want}");
    }

    #[test]
    fn identical_params_and_grads_stay_identical() {
        let mut params = Params::new();
        params.add("a", Tensor::new(&[1], vec![0.7], true).unwrap());
        params.add("b", Tensor::new(&[1], vec![0.7], true).unwrap());
        let mut adam = AdamState::new(&params, 1e-3);
        for step in 0..5 {
            params.zero_grad();
            for (_, (_, t)) in params.iter_mut_indexed() {
                t.grad = Some(vec![0.3 * (step as f64 + 1.0)]);
            }
            adam.step(&mut params).unwrap();
        }
        let vals: Vec<f64> = params.iter().map(|(_, t)| t.values[0]).collect();
        assert_eq!(vals[0], vals[1]);
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let mut params = single_param(1.0);
        let mut adam = AdamState::new(&params, 1e-3);
        assert!(matches!(adam.step(&mut params), Err(Error::Usage(_))));
    }
}
