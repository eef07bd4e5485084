//! AdamW with decoupled weight decay, and warmup-then-decay schedules.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates for one tensor; starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

impl AdamW {
    /// One update of `theta` at 1-based step `t`:
    /// `θ ← θ − lr·λ·θ − lr·m̂ / (√v̂ + ε)`.
    pub fn step(&self, theta: &mut [f64], grad: &[f64], state: &mut Moments, lr: f64, t: u64) {
        assert_eq!(theta.len(), grad.len(), "parameter/gradient length");
        assert_eq!(theta.len(), state.m.len(), "parameter/moment length");
        assert!(t >= 1, "adam steps are 1-based");
        let bc1 = 1.0 - self.beta1.powf(t as f64);
        let bc2 = 1.0 - self.beta2.powf(t as f64);
        for i in 0..theta.len() {
            let g = grad[i];
            state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * g;
            state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            theta[i] -= lr * self.weight_decay * theta[i] + lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    LinearDecay,
    CosineDecay,
}

/// Warmup length as a step count (`100`) or a fraction of the run (`0.1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Warmup {
    Steps(u64),
    Ratio(f64),
}

impl Default for Warmup {
    fn default() -> Self {
        Warmup::Steps(0)
    }
}

impl Warmup {
    pub fn steps(self, total: u64) -> u64 {
        match self {
            Warmup::Steps(n) => n.min(total),
            Warmup::Ratio(r) => ((r * total as f64).round() as u64).min(total),
        }
    }
}

/// Learning rate at 1-based `step` of `total`: linear ramp `0 → lr` over the
/// warmup, then constant or decaying to exactly 0 at `total`.
pub fn lr_at(step: u64, total: u64, lr: f64, schedule: Schedule, warmup: Warmup) -> f64 {
    let w = warmup.steps(total);
    if step <= w {
        return lr * step as f64 / w as f64;
    }
    if total == w {
        return lr;
    }
    let progress = (step.min(total) - w) as f64 / (total - w) as f64;
    match schedule {
        Schedule::Constant => lr,
        Schedule::LinearDecay => lr * (1.0 - progress),
        Schedule::CosineDecay => lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
    }
}
