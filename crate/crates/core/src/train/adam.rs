use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
}

impl Adam {
    /// Standard moments `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n_params], v: vec![0.0; n_params], step_count: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update in place. A non-finite gradient leaves state and parameters
    /// untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(contract(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient component {i} is {}", grads[i])));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = Adam::new(1, 1e-4);
        let mut p = [0.0];
        opt.step(&mut p, &[2.0]).unwrap();
        let expected = -1e-4 * 2.0 / (2.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_keeps_params_and_counts_step() {
        let mut opt = Adam::new(2, 0.1);
        let mut p = [1.0, -3.0];
        opt.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, [1.0, -3.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn non_finite_gradient_is_refused() {
        let mut opt = Adam::new(1, 0.1);
        let mut p = [1.0];
        assert!(matches!(opt.step(&mut p, &[f64::NAN]), Err(Error::NonFinite(_))));
        assert_eq!(p, [1.0]);
        assert_eq!(opt.step_count(), 0);
    }
}
