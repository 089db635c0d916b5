use crate::error::{DbpError, Result};
use crate::nn::ParamView;

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with decoupled weight decay.
///
/// Moments are created lazily on the first step and are matched to parameters by
/// position; the parameter name is checked on every step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    fn ensure_moments(&mut self, params: &[ParamView<'_>]) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    name: p.name.clone(),
                    m: vec![0.0; p.value.len()],
                    v: vec![0.0; p.value.len()],
                })
                .collect();
            return Ok(());
        }
        if self.moments.len() != params.len() {
            return Err(DbpError::State(format!(
                "optimizer tracks {} parameters, model has {}",
                self.moments.len(),
                params.len()
            )));
        }
        for (mo, p) in self.moments.iter().zip(params) {
            if mo.name != p.name || mo.m.len() != p.value.len() {
                return Err(DbpError::State(format!(
                    "optimizer moment `{}` does not match parameter `{}`",
                    mo.name, p.name
                )));
            }
        }
        Ok(())
    }

    /// One update of every parameter with learning rate `lr`.
    ///
    /// Gradients are validated before any parameter is touched.
    pub fn step(&mut self, params: &mut [ParamView<'_>], lr: f64) -> Result<()> {
        if let Some(bad) = params.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(DbpError::NonFiniteGradient(bad.name.clone()));
        }
        self.ensure_moments(params)?;
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            weight_decay,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (p, mo) in params.iter_mut().zip(self.moments.iter_mut()) {
            let decay = if p.decay { lr * weight_decay } else { 0.0 };
            for (((w, &g), m), v) in p
                .value
                .iter_mut()
                .zip(p.grad.iter())
                .zip(mo.m.iter_mut())
                .zip(mo.v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
