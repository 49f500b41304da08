use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::param::{ParamId, Parameter};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_global_norm<'a, T, I>(params: I, max_norm: f64) -> f64
where
    T: Scalar,
    I: IntoIterator<Item = &'a mut Parameter<T>>,
{
    let mut params: Vec<&mut Parameter<T>> = params.into_iter().collect();
    let norm = params.iter().map(|p| p.grad().l2_norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = T::of(max_norm / norm);
        for p in params.iter_mut() {
            p.grad_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }
    norm
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_ratio: f64, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::config("total_steps must be at least 1"));
        }
        if !(0.0..=1.0).contains(&warmup_ratio) {
            return Err(Error::config(format!("warmup_ratio {warmup_ratio} outside [0, 1]")));
        }
        let warmup_steps = ((warmup_ratio * total_steps as f64).round() as usize).min(total_steps);
        Ok(LrSchedule {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }

    /// Learning rate for 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return self.base_lr;
            }
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        0.5 * self.base_lr * (1.0 + (PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_ratio: 0.1,
            total_steps: 1,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay and a warmup/cosine schedule.
pub struct AdamW {
    config: AdamWConfig,
    schedule: LrSchedule,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        let schedule = LrSchedule::new(config.lr, config.warmup_ratio, config.total_steps)?;
        Ok(AdamW {
            config,
            schedule,
            state: HashMap::new(),
        })
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Applies one update at 1-based `step`; frozen parameters are skipped.
    /// Returns the learning rate used.
    pub fn step<'a, T, I>(&mut self, params: I, step: usize) -> Result<f64>
    where
        T: Scalar,
        I: IntoIterator<Item = &'a mut Parameter<T>>,
    {
        if step == 0 {
            return Err(Error::contract("optimizer step index is 1-based"));
        }
        let lr = self.schedule.lr_at(step);
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(step as i32);
        let bc2 = 1.0 - c.beta2.powi(step as i32);
        for p in params {
            if !p.trainable() {
                continue;
            }
            let n = p.numel();
            let st = self.state.entry(p.id()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let grads: Vec<f64> = p.grad().data().iter().map(|g| g.as_f64()).collect();
            let values = p.value_mut();
            for i in 0..n {
                let g = grads[i];
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                let mut w = values[i].as_f64();
                w -= lr * c.weight_decay * w;
                w -= lr * m_hat / (v_hat.sqrt() + c.eps);
                values[i] = T::of(w);
            }
        }
        Ok(lr)
    }
}
