//! Adam optimizer.

use crate::error::{Error, Result};

/// First/second-moment state for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: `p -= lr * m_hat / (sqrt(v_hat) + eps)` with bias
    /// correction. Zero gradients leave parameters untouched.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], learning_rate: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape_mismatch(
                format!("{} parameters", self.m.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        self.step += 1;
        let t = self.step as f64;
        let corr1 = 1.0 - self.beta1.powf(t);
        let corr2 = 1.0 - self.beta2.powf(t);
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] as f64 / corr1;
            let v_hat = self.v[i] as f64 / corr2;
            params[i] -= (learning_rate * m_hat / (v_hat.sqrt() + self.epsilon)) as f32;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = vec![0.5f32, -1.0, 2.0];
        let mut opt = Adam::new(3);
        opt.step(&mut params, &[0.0; 3], 1e-2).unwrap();
        assert_eq!(params, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        // After bias correction the first update is -lr * g/|g| up to the
        // epsilon regularizer.
        let mut params = vec![0.0f32, 0.0, 0.0];
        let grads = vec![0.3f32, -0.7, 1.5];
        let lr = 1e-3;
        let mut opt = Adam::new(3);
        opt.step(&mut params, &grads, lr).unwrap();
        for (p, g) in params.iter().zip(&grads) {
            let expect = -(lr as f32) * g.signum();
            assert!(
                (p - expect).abs() < 1e-6,
                "param {p} vs expected {expect}"
            );
        }
    }

    #[test]
    fn identical_runs_take_identical_trajectories() {
        let run = || {
            let mut params = vec![1.0f32, -2.0];
            let mut opt = Adam::new(2);
            for k in 0..50 {
                let grads = vec![params[0] * 0.1 + k as f32 * 1e-3, params[1] * 0.2];
                opt.step(&mut params, &grads, 5e-3).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut opt = Adam::new(2);
        let mut params = vec![0.0f32; 3];
        assert!(opt.step(&mut params, &[0.0; 2], 1e-3).is_err());
    }
}
