//! AdamW with an optional cosine learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Cosine decay from the base learning rate to zero over `total_steps`.
    Cosine { total_steps: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl AdamWConfig {
    pub fn new(lr: f64, schedule: Schedule) -> Self {
        AdamWConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, schedule }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// AdamW state over a fixed group of parameter buffers, addressed by index.
pub struct AdamW {
    cfg: AdamWConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// `sizes[i]` is the element count of parameter buffer `i`.
    pub fn new(cfg: AdamWConfig, sizes: &[usize]) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        match self.cfg.schedule {
            Schedule::Constant => self.cfg.lr,
            Schedule::Cosine { total_steps } => {
                let t = (self.step as f64) / (total_steps.max(1) as f64);
                let t = t.min(1.0);
                0.5 * self.cfg.lr * (1.0 + fmath::cos(fmath::PI * t))
            }
        }
    }

    /// One update over all parameter buffers. `params` and `grads` must be
    /// index-aligned with the sizes passed at construction.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        let lr = self.current_lr();
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.cfg.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.cfg.beta2, self.step as f64);
        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..p.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (fmath::sqrt(v_hat) + self.cfg.eps)
                    + self.cfg.weight_decay * p[i]);
            }
        }
    }
}
