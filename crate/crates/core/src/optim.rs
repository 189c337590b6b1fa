//! AdamW with decoupled weight decay, and the warmup-then-cosine schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

/// Optimizer state keyed by parameter name. Moments are created on a
/// parameter's first gradient, so each parameter keeps its own step count.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

/// Vectors and scalars (biases, norm gains, query seeds) are not decayed.
pub fn decays(shape: &[usize]) -> bool {
    shape.len() >= 2
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update. Parameters absent from `grads` are left alone.
    /// A non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f32>>, lr: f64, wd: f64) -> Result<()> {
        for (name, g) in grads {
            let entry = params.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            if g.len() != entry.data.len() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: entry.shape.clone(),
                    found: vec![g.len()],
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGrad { name: name.clone() });
            }
        }
        let AdamWConfig { beta1, beta2, eps } = self.cfg;
        for (name, g) in grads {
            let entry = params.get_mut(name).expect("checked above");
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t as i32);
            let c2 = 1.0 - beta2.powi(st.t as i32);
            let shrink = if decays(&entry.shape) { 1.0 - lr * wd } else { 1.0 };
            for (i, w) in entry.data.iter_mut().enumerate() {
                let gi = g[i] as f64;
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                let update = (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + eps);
                *w = ((*w as f64) * shrink - lr * update) as f32;
            }
        }
        Ok(())
    }
}

/// Learning rate for 0-based `step` of `total`: linear warmup to `base`
/// over `warmup` steps, then cosine decay reaching 0 at the last step.
pub fn lr_at(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let last = total.saturating_sub(1);
    if last <= warmup {
        return base;
    }
    let progress = ((step - warmup) as f64 / (last - warmup) as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}
