use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `lr0 · (1 − t/T)^power`, defined for `0 ≤ t ≤ T`.
pub fn poly_lr(lr0: f64, t: u64, total: u64, power: f64) -> Result<f64> {
    if t > total {
        return Err(Error::InvalidArgument(format!("step {t} beyond schedule length {total}")));
    }
    if total == 0 {
        return Ok(lr0);
    }
    Ok(lr0 * (1.0 - t as f64 / total as f64).powf(power))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient; `weight_decay · θ` is added to the gradient before
    /// the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 3e-4,
        }
    }
}

/// Moment estimates keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of completed updates.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update of every `(name, θ, ∇θ)` triple with learning rate `lr`.
    pub fn update<'a, I>(&mut self, lr: f64, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut [T], &'a [T])>,
    {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = T::of(1.0 - c.beta1.powi(t));
        let bias2 = T::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, lr, eps, wd) = (T::one(), T::of(lr), T::of(c.eps), T::of(c.weight_decay));
        for (name, theta, grad) in params {
            if theta.len() != grad.len() {
                return Err(Error::Shape(format!(
                    "parameter {name} has {} values but {} gradients",
                    theta.len(),
                    grad.len()
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); theta.len()], vec![T::zero(); theta.len()]));
            if m.len() != theta.len() {
                return Err(Error::Shape(format!("parameter {name} changed size between steps")));
            }
            for i in 0..theta.len() {
                let g = grad[i] + wd * theta[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
