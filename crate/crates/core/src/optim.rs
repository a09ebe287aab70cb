//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Grads;
use crate::models::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            ..Self::default()
        }
    }

    /// One update of every trainable parameter that has a gradient.
    /// Frozen parameters are never touched.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &Grads<f32>, lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            if !p.trainable {
                continue;
            }
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for ((w, &gi), (mi, vi)) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                let gi = gi as f64;
                let m1 = c.beta1 * *mi as f64 + (1.0 - c.beta1) * gi;
                let v1 = c.beta2 * *vi as f64 + (1.0 - c.beta2) * gi * gi;
                *mi = m1 as f32;
                *vi = v1 as f32;
                let upd = (m1 / bc1) / ((v1 / bc2).sqrt() + c.eps);
                let w0 = *w as f64;
                *w = (w0 - lr * (upd + c.weight_decay * w0)) as f32;
            }
        }
    }
}
