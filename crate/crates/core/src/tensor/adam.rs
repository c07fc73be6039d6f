use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
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
            ..Self::default()
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter index; the
/// caller clears gradients between steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.params_mut().iter_mut().enumerate() {
            if self.m.len() <= i {
                self.m.push(Tensor::zeros(p.value.shape()));
                self.v.push(Tensor::zeros(p.value.shape()));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let values = p.value.data_mut();
            for (j, &g) in p.grad.data().iter().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    /// Scalar Adam recurrence written out longhand.
    fn reference(grads: &[f64], x0: f64) -> Vec<f64> {
        let (lr, b1, b2, eps) = (0.01f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut m, mut v, mut x) = (0.0, 0.0, x0);
        let mut out = vec![];
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            out.push(x);
        }
        out
    }

    #[test]
    fn three_steps_match_scalar_recurrence() {
        let grads = [0.5, -2.0, 3.0];
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(Shape::vector(1), 1.0));
        let mut adam = Adam::new(AdamConfig::default());
        let expected = reference(&grads, 1.0);
        for (g, want) in grads.iter().zip(expected) {
            store.zero_grads();
            store.get_mut(id).grad.data_mut()[0] = *g;
            adam.step(&mut store);
            assert!((store.value(id).data()[0] - want).abs() < 1e-15);
        }
        assert_eq!(adam.steps(), 3);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(Shape::vector(3), vec![0.0, 0.0, 0.0]).unwrap());
        store.get_mut(id).grad = Tensor::from_vec(Shape::vector(3), vec![4.0, -0.3, 1e-3]).unwrap();
        Adam::new(AdamConfig::default()).step(&mut store);
        // m_hat = g and v_hat = g^2 after one step, so the move is lr * g / (|g| + eps).
        for (v, g) in store.value(id).data().iter().zip([4.0f64, -0.3, 1e-3]) {
            let want = -0.01 * g / (g.abs() + 1e-8);
            assert!((v - want).abs() < 1e-15);
            assert!((v + 0.01 * g.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_leaves_fresh_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(Shape::vector(2), 0.7));
        Adam::new(AdamConfig::default()).step(&mut store);
        assert_eq!(store.value(id).data(), &[0.7, 0.7]);
    }
}
