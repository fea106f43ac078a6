use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam moments (β₁ = 0.9, β₂ = 0.999, ε = 1e-8 by default).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::config(format!(
                "optimizer state holds {} entries, params {} and gradient {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient entry {i}")));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut opt = Adam::new(2);
        let mut p = vec![1.0, 1.0];
        opt.step(&mut p, &[3.0, -0.5], 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut opt = Adam::new(1);
        let mut p = vec![2.0];
        opt.step(&mut p, &[1.0], 0.0).unwrap();
        assert_eq!(p, vec![2.0]);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut opt = Adam::new(1);
        let mut p = vec![2.0];
        assert!(opt.step(&mut p, &[f64::NAN], 0.1).is_err());
        assert_eq!(opt.t, 0);
    }
}
