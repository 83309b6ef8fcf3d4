use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Affine parameters and running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.gamma.len();
        if self.beta.len() != d || self.running_mean.len() != d || self.running_var.len() != d {
            return config("batch-norm vectors differ in length");
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return config(format!("batch-norm momentum {} outside (0,1)", self.momentum));
        }
        if !(self.epsilon > 0.0) {
            return config("batch-norm epsilon must be positive");
        }
        if self.running_var.iter().any(|&v| !(v >= 0.0)) {
            return config("batch-norm running variance must be non-negative");
        }
        Ok(())
    }

    /// Exponential update of the running statistics from one batch.
    ///
    /// `batch_var` is the unbiased batch variance.
    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_state() {
        let s = BatchNormState::new(3);
        assert_eq!(s.gamma, vec![1.0; 3]);
        assert_eq!(s.beta, vec![0.0; 3]);
        assert_eq!(s.running_mean, vec![0.0; 3]);
        assert_eq!(s.running_var, vec![1.0; 3]);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn running_update_blends_with_momentum() {
        let mut s = BatchNormState::new(1);
        s.update_running(&[2.0], &[3.0]);
        assert!((s.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((s.running_var[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn rejects_invalid_state() {
        let mut s = BatchNormState::new(2);
        s.running_var[0] = -1.0;
        assert!(s.validate().is_err());
        let mut s = BatchNormState::new(2);
        s.epsilon = 0.0;
        assert!(s.validate().is_err());
        let mut s = BatchNormState::new(2);
        s.beta.pop();
        assert!(s.validate().is_err());
    }
}
