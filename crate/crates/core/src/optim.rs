//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{CarlError, Result};
use crate::tensor::{ParamStore, Tensor};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_FINAL_LR: f64 = 1e-6;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: DEFAULT_WEIGHT_DECAY,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every tensor of one store.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        AdamW {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores state saved by a checkpoint.
    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        let ok = m.len() == self.m.len()
            && v.len() == self.v.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.shape() == b.shape())
            && v.iter().zip(&self.v).all(|(a, b)| a.shape() == b.shape());
        if !ok {
            return Err(CarlError::validation("optimizer state does not match parameters"));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update using the gradients currently stored in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        assert_eq!(store.len(), self.m.len(), "optimizer built for another store");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = store.grad(id).data().to_vec();
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let p = store.value_mut(id).data_mut();
            for j in 0..p.len() {
                p[j] *= 1.0 - lr * c.weight_decay;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

/// Cosine annealing from `lr0` at step 0 to `lr_final` at `total`;
/// steps past `total` stay at `lr_final`.
pub fn cosine_lr(step: u64, total: u64, lr0: f64, lr_final: f64) -> f64 {
    if step == 0 {
        return lr0;
    }
    if step >= total {
        return lr_final;
    }
    let t = step as f64 / total as f64;
    lr_final + 0.5 * (lr0 - lr_final) * (1.0 + (PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut s = scalar_store(1.5);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&s, cfg);
        opt.step(&mut s, 0.1);
        assert_eq!(s.get("theta").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        let id = s.id("theta").unwrap();
        s.grad_mut(id).data_mut()[0] = 1.0;
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&s, cfg);
        opt.step(&mut s, 0.1);
        // m̂ = v̂ = 1 after bias correction, so the step is lr / (1 + eps)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.get("theta").unwrap().item() - expected).abs() < 1e-15);
        assert!((s.get("theta").unwrap().item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_only() {
        let mut s = scalar_store(2.0);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        opt.step(&mut s, 0.01);
        assert_eq!(s.get("theta").unwrap().item(), 2.0 * (1.0 - 0.01 * 0.04));
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 1e-6), 1e-4);
        assert_eq!(cosine_lr(100, 100, 1e-4, 1e-6), 1e-6);
        assert_eq!(cosine_lr(250, 100, 1e-4, 1e-6), 1e-6);
        assert!((cosine_lr(50, 100, 1e-4, 1e-6) - 5.05e-5).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 1e-4, 1e-6);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
