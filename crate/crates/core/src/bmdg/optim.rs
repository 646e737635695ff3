//! Adam with L2 weight decay over a [`ParamStore`].

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::config::OptimConfig;
use crate::error::Result;
use crate::params::ParamStore;

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            state: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &BTreeMap<String, Moments> {
        &self.state
    }

    pub fn restore(&mut self, state: BTreeMap<String, Moments>) {
        self.state = state;
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, var) in params.vars() {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let theta = var.as_tensor().detach();
            let grad = grad.detach();
            let g = if self.weight_decay > 0.0 {
                (&grad + (&theta * self.weight_decay)?)?
            } else {
                grad
            };
            let entry = match self.state.remove(name) {
                Some(e) => e,
                None => Moments {
                    m: theta.zeros_like()?,
                    v: theta.zeros_like()?,
                    steps: 0,
                },
            };
            let m = ((&entry.m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&entry.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let steps = entry.steps + 1;
            let bc1 = 1.0 - self.beta1.powi(steps as i32);
            let bc2 = 1.0 - self.beta2.powi(steps as i32);
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)?.div(&denom)? * lr)?;
            var.set(&(theta - update)?)?;
            self.state.insert(name.clone(), Moments { m, v, steps });
        }
        Ok(())
    }
}
