use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay: each step also shrinks parameters by
    /// `learning_rate·weight_decay`.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Result<Self> {
        let positive = [config.learning_rate, config.beta1, config.beta2, config.epsilon]
            .iter()
            .all(|x| x.is_finite() && *x > 0.0);
        if !positive || config.beta1 >= 1.0 || config.beta2 >= 1.0 || !(config.weight_decay >= 0.0) {
            return Err(Error::InvalidInput(format!("invalid Adam hyperparameters {config:?}")));
        }
        Ok(Self {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update in place. A non-finite gradient leaves both the
    /// parameters and the optimizer state untouched.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        check_dim("adam parameters", self.m.len(), params.len())?;
        check_dim("adam gradient", self.m.len(), grad.len())?;
        if let Some(i) = grad.as_slice().iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient entry {i}")));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= learning_rate * (m_hat / (v_hat.sqrt() + epsilon) + weight_decay * *p);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut state = AdamState::new(3, AdamConfig::default()).unwrap();
        let mut p = ParamVector::new(vec![1.0, -2.0, 0.5]);
        state.step(&mut p, &ParamVector::zeros(3)).unwrap();
        assert_eq!(p.as_slice(), &[1.0, -2.0, 0.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // t=1: m̂ = g, v̂ = g², so Δ = lr·g/(|g| + ε).
        let mut state = AdamState::new(1, AdamConfig::with_learning_rate(0.1)).unwrap();
        let mut p = ParamVector::new(vec![1.0]);
        state.step(&mut p, &ParamVector::new(vec![1.0])).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.as_slice()[0] - expected).abs() < 1e-15);
        assert!((p.as_slice()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn identical_entries_stay_identical() {
        let mut state = AdamState::new(2, AdamConfig::default()).unwrap();
        let mut p = ParamVector::new(vec![0.3, 0.3]);
        for k in 0..10 {
            let g = 0.1 * k as f64 - 0.4;
            state.step(&mut p, &ParamVector::new(vec![g, g])).unwrap();
        }
        assert_eq!(p.as_slice()[0], p.as_slice()[1]);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let mut state = AdamState::new(2, AdamConfig::default()).unwrap();
        let mut p = ParamVector::new(vec![1.0, 2.0]);
        let err = state.step(&mut p, &ParamVector::new(vec![0.5, f64::NAN]));
        assert!(matches!(err, Err(Error::Numerical(_))));
        assert_eq!(p.as_slice(), &[1.0, 2.0]);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn rejects_non_positive_learning_rate() {
        assert!(AdamState::new(1, AdamConfig::with_learning_rate(0.0)).is_err());
    }
}
