//! ADAM updates and the convergence window used by all model fits.

use crate::error::{Error, Result};

/// ADAM hyperparameters. The defaults are used everywhere in this crate.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 0.005, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self { m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One descent step on `params` along `grads` (gradients of the quantity
    /// being *minimized*; callers maximizing a likelihood pass its negated
    /// gradients). Any non-finite gradient rejects the whole step: parameters
    /// and moments are left untouched and a numeric failure is returned so
    /// the caller can count and react.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &AdamConfig) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "param dimension fixed at construction");
        assert_eq!(grads.len(), self.m.len(), "gradient dimension must match");
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient; step rejected".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grads[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        Ok(())
    }
}

/// Convergence detector: training stops when the relative change of the
/// objective, averaged over a trailing window, drops below a tolerance.
#[derive(Clone, Debug)]
pub struct ConvergenceWindow {
    window: usize,
    tolerance: f64,
    changes: std::collections::VecDeque<f64>,
    last: Option<f64>,
}

impl ConvergenceWindow {
    /// The window and tolerance used by every fit in this crate: mean
    /// relative change below 1e-5 over 20 consecutive steps.
    pub fn standard() -> Self {
        Self::new(20, 1e-5)
    }

    pub fn new(window: usize, tolerance: f64) -> Self {
        Self { window, tolerance, changes: std::collections::VecDeque::new(), last: None }
    }

    /// Record the objective after a step; returns true once converged.
    pub fn push(&mut self, value: f64) -> bool {
        if let Some(prev) = self.last {
            let rel = (value - prev).abs() / (prev.abs() + 1e-12);
            self.changes.push_back(rel);
            if self.changes.len() > self.window {
                self.changes.pop_front();
            }
        }
        self.last = Some(value);
        self.changes.len() == self.window
            && self.changes.iter().sum::<f64>() / (self.window as f64) < self.tolerance
    }
}
