//! Adaptive-moment optimiser and learning-rate schedules shared by decision
//! layer training and image optimisation.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Cosine annealing from `lr` to `min_lr` over the run.
    Cosine { lr: f64, min_lr: f64 },
    /// Linear warmup to `max_lr` over `warmup_fraction` of the run, then cosine decay to zero.
    WarmupCosine { max_lr: f64, warmup_fraction: f64 },
}

impl LrSchedule {
    /// Rate for step `step` of `total` (0-based).
    pub fn at(&self, step: usize, total: usize) -> f64 {
        let total = total.max(1) as f64;
        let t = step as f64;
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine { lr, min_lr } => {
                min_lr + 0.5 * (lr - min_lr) * (1.0 + (std::f64::consts::PI * t / total).cos())
            }
            LrSchedule::WarmupCosine { max_lr, warmup_fraction } => {
                let warm = (warmup_fraction * total).max(1.0);
                if t < warm {
                    max_lr * (t + 1.0) / warm
                } else {
                    let progress = ((t - warm) / (total - warm).max(1.0)).min(1.0);
                    0.5 * max_lr * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }

    pub fn peak(&self) -> f64 {
        match *self {
            LrSchedule::Constant { lr } | LrSchedule::Cosine { lr, .. } => lr,
            LrSchedule::WarmupCosine { max_lr, .. } => max_lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// Decay added to the gradient (classic Adam with L2).
    Coupled,
    /// Decay applied directly to the parameters (AdamW).
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecayMode,
}

impl AdamConfig {
    pub fn adam(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decay_mode: WeightDecayMode::Coupled,
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        Self {
            decay_mode: WeightDecayMode::Decoupled,
            ..Self::adam(weight_decay)
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::adamw(0.01)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            let mut g = grad[i];
            match c.decay_mode {
                WeightDecayMode::Coupled => g += c.weight_decay * params[i],
                WeightDecayMode::Decoupled => params[i] -= lr * c.weight_decay * params[i],
            }
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + c.eps);
        }
    }
}
