//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            step: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One descent step on `params` along `grad` (a gradient of a loss to minimise).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() || params.len() != self.first_moment.len() {
            return Err(Error::invalid(format!(
                "adam length mismatch: params {}, grad {}, state {}",
                params.len(),
                grad.len(),
                self.first_moment.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            params[i] -= self.learning_rate * (m / c1) / ((v / c2).sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(state: &AdamState, params: &[f64], grad: &[f64]) -> Result<(AdamState, Vec<f64>)> {
    let mut next = state.clone();
    let mut out = params.to_vec();
    next.step(&mut out, grad)?;
    Ok((next, out))
}
