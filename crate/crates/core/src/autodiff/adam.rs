use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::nets::Parameterized;
use crate::error::{Error, Result};

/// Adam hyper-parameters with a step-decay learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    /// Multiplier applied once every `decay_every` steps.
    pub decay: f64,
    pub decay_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.005,
            decay: 0.9997,
            decay_every: 5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one network.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new<P: Parameterized + ?Sized>(config: AdamConfig, net: &P) -> Self {
        let zeros: Vec<_> = net
            .parameters()
            .iter()
            .map(|p| Array2::zeros(p.raw_dim()))
            .collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `lr * decay^floor(step / decay_every)`.
    pub fn effective_lr(&self) -> f64 {
        let every = self.config.decay_every.max(1);
        let k = (self.step / every) as i32;
        self.config.lr * self.config.decay.powi(k)
    }

    /// One Adam step. A non-finite gradient aborts the step and leaves both
    /// parameters and moments untouched.
    pub fn update<P: Parameterized + ?Sized>(&mut self, net: &mut P, grads: &[Array2<f64>]) -> Result<()> {
        let mut params = net.parameters_mut();
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::dimension("adam parameter list", self.m.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dim() != g.dim() || self.m[i].dim() != g.dim() {
                return Err(Error::dimension(
                    format!("adam tensor {i}"),
                    format!("{:?}", p.dim()),
                    format!("{:?}", g.dim()),
                ));
            }
        }
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Training {
                stage: "adam".into(),
                reason: format!("non-finite gradient in tensor {i} at step {}", self.step),
            });
        }

        let lr = self.effective_lr();
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        self.step += 1;
        Ok(())
    }
}
