//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::layers::Param;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers keyed by parameter name, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::InvalidParameter(format!("learning rate must be > 0, got {}", config.lr)));
        }
        Ok(AdamW {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    /// One update of every named parameter from its accumulated gradient.
    /// Any non-finite gradient rejects the whole step, leaving parameters
    /// and state untouched.
    pub fn step(&mut self, params: &mut [(&'static str, &mut Param)]) -> Result<()> {
        for (name, p) in params.iter() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite("parameter gradient"));
            }
            if let Some(m) = self.m.get(*name) {
                if m.shape() != p.value.shape() {
                    return Err(Error::shape(format!("optimizer state {name}"), p.value.shape(), m.shape()));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= c.lr * c.weight_decay * *w;
                    *w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                });
        }
        Ok(())
    }
}
