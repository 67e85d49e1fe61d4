use serde::{Deserialize, Serialize};

use crate::params::{GradBuffer, ParameterStore};
use crate::tensor::Tensor;

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Completed updates.
    pub t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParameterStore) -> Self {
        Self {
            config,
            m: store.zeros_like(),
            v: store.zeros_like(),
            t: 0,
        }
    }

    /// One update of the parameters where `trainable` is set; weight decay
    /// only where `decay` is set.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &GradBuffer,
        lr: f64,
        trainable: &[bool],
        decay: &[bool],
    ) {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t.min(i32::MAX as u64) as i32);
        for pid in 0..store.len() {
            if !trainable[pid] {
                continue;
            }
            let wd = if decay[pid] { c.weight_decay } else { 0.0 };
            let g = grads.tensors[pid].data();
            let m = self.m[pid].data_mut();
            let v = self.v[pid].data_mut();
            let w = store.value_mut(pid).data_mut();
            for k in 0..w.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                w[k] -= lr * (mhat / (vhat.sqrt() + c.eps) + wd * w[k]);
            }
        }
    }
}

/// Linear warmup over the first `warmup_frac` of `total` steps, then
/// cosine decay to `min_ratio · peak`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub total: u64,
    pub warmup: u64,
    pub min_ratio: f64,
}

impl CosineSchedule {
    pub fn new(peak: f64, total: u64, warmup_frac: f64, min_ratio: f64) -> Self {
        let warmup = if warmup_frac > 0.0 && total > 0 {
            ((total as f64 * warmup_frac).ceil() as u64).max(1)
        } else {
            0
        };
        Self {
            peak,
            total,
            warmup,
            min_ratio,
        }
    }

    /// Learning rate of update `step` (0-based).
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let p = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        self.peak * (self.min_ratio + (1.0 - self.min_ratio) * cos)
    }
}

/// `ema ← decay · ema + (1 − decay) · live`.
pub fn ema_update(ema: &mut ParameterStore, live: &ParameterStore, decay: f64) {
    for pid in 0..live.len() {
        let src = live.value(pid).data();
        let dst = ema.value_mut(pid).data_mut();
        for (e, &w) in dst.iter_mut().zip(src) {
            *e = decay * *e + (1.0 - decay) * w;
        }
    }
}
