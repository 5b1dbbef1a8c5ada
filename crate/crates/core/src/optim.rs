//! One-cycle cosine learning-rate schedule and AdamW.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_max_lr")]
    pub max_lr: f64,
    pub total_steps: usize,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    /// Start of warmup is `max_lr / start_div`.
    #[serde(default = "default_start_div")]
    pub start_div: f64,
    /// End of decay is `max_lr / final_div`.
    #[serde(default = "default_final_div")]
    pub final_div: f64,
}

fn default_max_lr() -> f64 {
    1e-5
}
fn default_warmup() -> f64 {
    0.1
}
fn default_start_div() -> f64 {
    25.0
}
fn default_final_div() -> f64 {
    1e4
}

impl ScheduleConfig {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self {
            max_lr,
            total_steps,
            warmup_fraction: default_warmup(),
            start_div: default_start_div(),
            final_div: default_final_div(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Invalid(format!("warmup fraction {} must be in (0, 1)", self.warmup_fraction)));
        }
        if !(self.max_lr.is_finite() && self.max_lr >= 0.0) {
            return Err(Error::Invalid(format!("max_lr {} must be finite and non-negative", self.max_lr)));
        }
        if self.start_div < 1.0 || self.final_div < 1.0 {
            return Err(Error::Invalid("schedule divisors must be at least 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Invalid("total_steps must be positive".into()));
        }
        Ok(())
    }

    /// Step at which the peak is reached; at least 1.
    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.total_steps as f64).round() as usize).clamp(1, self.total_steps)
    }
}

/// Linear warmup from `max/start_div` to `max`, then cosine decay to `max/final_div`.
pub fn lr_at(step: usize, s: &ScheduleConfig) -> Result<f64> {
    s.validate()?;
    if step > s.total_steps {
        return Err(Error::Invalid(format!("step {step} beyond schedule of {} steps", s.total_steps)));
    }
    let w = s.warmup_steps();
    let start = s.max_lr / s.start_div;
    let floor = s.max_lr / s.final_div;
    if step <= w {
        return Ok(s.max_lr - (s.max_lr - start) * (w - step) as f64 / w as f64);
    }
    let p = (step - w) as f64 / (s.total_steps - w) as f64;
    Ok((floor + (s.max_lr - floor) * 0.5 * (1.0 + (PI * p).cos())).min(s.max_lr))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
            weight_decay: 0.05,
        }
    }
}

/// Moment accumulators, keyed by parameter name, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub hyper: AdamW,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(hyper: AdamW) -> Self {
        Self {
            hyper,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update for every parameter that has a
/// gradient. Non-finite gradients abort before anything changes.
pub fn adamw_step(params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut OptimState, lr: f64) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("gradient for `{name}` is {:?}, parameter {:?}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let AdamW {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.hyper;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let update = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            *pi = *pi * (1.0 - lr * weight_decay) - lr * update;
        }
        p.round_to_f32();
    }
    Ok(())
}
