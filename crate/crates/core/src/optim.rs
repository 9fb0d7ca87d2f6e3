//! Adam with bias correction.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First moment estimate.
    pub m: Vec<f64>,
    /// Second moment estimate.
    pub v: Vec<f64>,
    /// Round parameters and moments to `f32` after every update, so the whole
    /// optimizer state survives an `f32` checkpoint unchanged.
    pub f32_state: bool,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            f32_state: false,
        }
    }

    pub fn with_f32_state(mut self) -> Self {
        self.f32_state = true;
        self
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let round = |x: f64| if self.f32_state { x as f32 as f64 } else { x };
        for i in 0..params.len() {
            let g = grads[i];
            let m = round(self.beta1 * self.m[i] + (1.0 - self.beta1) * g);
            let v = round(self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g);
            self.m[i] = m;
            self.v[i] = v;
            params[i] = round(params[i] - self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::new(2, 0.1, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -1.0];
        adam.update(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut adam = Adam::new(1, 0.05, 0.9, 0.999, 1e-8);
        let mut p = vec![5.0];
        for _ in 0..2000 {
            let g = 2.0 * (p[0] - 2.0);
            adam.update(&mut p, &[g]);
        }
        assert!((p[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn f32_state_is_representable() {
        let mut adam = Adam::new(3, 0.01, 0.9, 0.999, 1e-8).with_f32_state();
        let mut p = vec![0.1, 0.2, 0.3];
        for _ in 0..10 {
            adam.update(&mut p, &[0.123, -4.56, 7.89]);
        }
        for x in p.iter().chain(&adam.m).chain(&adam.v) {
            assert_eq!(*x, *x as f32 as f64);
        }
    }
}
