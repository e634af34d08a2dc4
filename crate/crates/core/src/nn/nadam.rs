use crate::error::{Error, Result};
use crate::nn::ParamVector;
use ndarray::{Array1, Zip};

/// Adam with Nesterov momentum (Nadam), constant momentum coefficient.
///
/// With step count `t` (after increment) and gradient `g`:
///
/// ```text
/// m  = β₁ m + (1 − β₁) g
/// v  = β₂ v + (1 − β₂) g²
/// m̂  = β₁ m / (1 − β₁^(t+1)) + (1 − β₁) g / (1 − β₁^t)
/// v̂  = v / (1 − β₂^t)
/// θ -= lr · m̂ / (√v̂ + ε)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct NadamState {
    first_moment: Array1<f64>,
    second_moment: Array1<f64>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl NadamState {
    pub fn new(len: usize) -> Self {
        Self::with_constants(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_constants(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            first_moment: Array1::zeros(len),
            second_moment: Array1::zeros(len),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector, lr: f64) -> Result<()> {
        if params.len() != self.len() || grad.len() != self.len() {
            return Err(Error::invalid(format!(
                "nadam state has {} entries, params {} and grad {}",
                self.len(),
                params.len(),
                grad.len()
            )));
        }
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if !grad.is_finite() {
            return Err(Error::Numeric("non-finite gradient passed to nadam".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c_next = 1.0 - b1.powi(t + 1);
        let c_now = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        Zip::from(params.values_mut())
            .and(&mut self.first_moment)
            .and(&mut self.second_moment)
            .and(grad.values())
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = b1 * *m / c_next + (1.0 - b1) * g / c_now;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = ParamVector::from_vec(vec![1.0, -2.0, 0.5]);
        let before = p.clone();
        let mut st = NadamState::new(3);
        st.step(&mut p, &ParamVector::zeros(3), 0.001).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn single_step_hand_evaluated() {
        // g = 2, θ = 1, lr = 0.1, β₁ = 0.9, β₂ = 0.999:
        // m = 0.2, v = 0.004, m̂ = 0.18/0.19 + 0.2/0.1, v̂ = 4
        let mut p = ParamVector::from_vec(vec![1.0]);
        let mut st = NadamState::new(1);
        st.step(&mut p, &ParamVector::from_vec(vec![2.0]), 0.1)
            .unwrap();
        let m_hat = 0.18 / 0.19 + 2.0;
        let expect = 1.0 - 0.1 * m_hat / (2.0 + 1e-8);
        assert!(
            (p.values()[0] - expect).abs() < 1e-14,
            "{} vs {expect}",
            p.values()[0]
        );
    }

    #[test]
    fn tiny_lr_is_nearly_identity() {
        let mut p = ParamVector::from_vec(vec![0.3, -0.7]);
        let mut st = NadamState::new(2);
        st.step(&mut p, &ParamVector::from_vec(vec![5.0, -1.0]), 1e-18)
            .unwrap();
        assert!((p.values()[0] - 0.3).abs() < 1e-15);
        assert!((p.values()[1] + 0.7).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut p = ParamVector::from_vec(vec![0.0]);
        let mut st = NadamState::new(1);
        assert!(matches!(
            st.step(&mut p, &ParamVector::from_vec(vec![f64::NAN]), 0.1),
            Err(Error::Numeric(_))
        ));
        assert!(st
            .step(&mut p, &ParamVector::from_vec(vec![1.0]), 0.0)
            .is_err());
        assert!(st.step(&mut p, &ParamVector::zeros(2), 0.1).is_err());
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut p = ParamVector::from_vec(vec![1.0, 2.0]);
            let mut st = NadamState::new(2);
            for k in 0..50 {
                let g = ParamVector::from_vec(vec![(k as f64).sin(), p.values()[0] * 0.1]);
                st.step(&mut p, &g, 0.01).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
