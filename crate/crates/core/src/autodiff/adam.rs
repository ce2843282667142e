//! Adam with decoupled weight decay.
//!
//! Moment buffers are keyed by parameter name, so the optimizer survives
//! tapes being rebuilt every step. Parameters without a gradient entry are
//! never touched; freezing a subnet is just not collecting its grads.

use std::collections::BTreeMap;

use crate::autodiff::{GradMap, ParamSet};
use crate::error::{Error, Result};
use crate::geom::fm;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: applied to the weight directly, not to the grad.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update from accumulated gradients. `scale` divides the
    /// grads first (for averaging micro-batches).
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap, scale: f64) -> Result<()> {
        if grads.is_empty() {
            return Ok(());
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - libm::pow(c.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.t as f64);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.data.len() != g.len() {
                return Err(Error::dim(format!(
                    "gradient for `{name}` has {} values, parameter has {}",
                    g.len(),
                    p.data.len()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let gi = g[i] as f64 * scale;
                let mi = c.beta1 * m[i] as f64 + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v[i] as f64 + (1.0 - c.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let wd = c.weight_decay * p.data[i] as f64;
                p.data[i] = (p.data[i] as f64 - c.lr * (m_hat / (fm::sqrt(v_hat) + c.eps) + wd)) as f32;
            }
        }
        Ok(())
    }
}
