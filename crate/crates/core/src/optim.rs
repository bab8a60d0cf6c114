//! AdamW with global gradient-norm clipping.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: HashMap<String, Mat>,
    v: HashMap<String, Mat>,
}

/// Norms observed while applying one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepNorms {
    pub raw: f64,
    pub clipped: f64,
}

pub fn global_norm(grads: &BTreeMap<String, Mat>) -> f64 {
    grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale `grads` in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Mat>, max_norm: f64) -> StepNorms {
    let raw = global_norm(grads);
    if raw > max_norm && raw > 0.0 {
        let k = max_norm / raw;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }
    StepNorms {
        raw,
        clipped: global_norm(grads),
    }
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clip, then apply one decoupled-weight-decay Adam update to every
    /// tensor in `grads`. Only trainable tensors should be present.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        mut grads: BTreeMap<String, Mat>,
    ) -> Result<StepNorms> {
        let norms = match self.config.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => {
                let n = global_norm(&grads);
                StepNorms { raw: n, clipped: n }
            }
        };
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let p = store.get_mut(&name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v.entry(name).or_insert_with(|| Mat::zeros(g.dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(&g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
                });
        }
        Ok(norms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn clip_caps_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), array![[3.0, 4.0]]);
        g.insert("b".to_string(), array![[12.0]]);
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n.raw - 13.0).abs() < 1e-12);
        assert!(n.clipped <= 1.0 + 1e-12);
        assert!((g["a"][[0, 0]] - 3.0 / 13.0).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut store = ParamStore::new(0);
        store.init_uniform("w", 2, 3);
        let before = store.clone();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            ..Default::default()
        });
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Mat::ones((2, 3)));
        opt.step(&mut store, g).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first Adam step is lr * sign(g)
        let mut store = ParamStore::new(0);
        store.insert("w", array![[0.0, 0.0]]);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            clip_norm: None,
            ..Default::default()
        });
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), array![[2.0, -0.5]]);
        opt.step(&mut store, g).unwrap();
        let w = store.get("w").unwrap();
        assert!((w[[0, 0]] + 0.1).abs() < 1e-6);
        assert!((w[[0, 1]] - 0.1).abs() < 1e-6);
    }
}
