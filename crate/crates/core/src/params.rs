//! Named, seeded parameter storage.
//!
//! Layers are built from `Var`s owned here, so optimizer updates made
//! through [`ParamStore::vars`] are visible to every layer that shares them.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, Linear};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)` (Kaiming, for ReLU layers).
    Kaiming { fan_in: usize },
    /// Uniform in `±1 / sqrt(fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Const(f64),
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Invalid(format!("parameter `{name}` defined twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Kaiming { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        zero_init: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Conv2d> {
        let fan_in = c_in * kernel * kernel;
        let w_init = if zero_init { Init::Zeros } else { Init::Kaiming { fan_in } };
        let w = self.create(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], w_init, rng)?;
        let b = self.create(&format!("{name}.bias"), &[c_out], Init::Zeros, rng)?;
        let cfg = Conv2dConfig {
            padding: kernel / 2,
            stride,
            ..Default::default()
        };
        Ok(Conv2d::new(w, Some(b), cfg))
    }

    pub fn linear(
        &mut self,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        zero_init: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Linear> {
        let w_init = if zero_init { Init::Zeros } else { Init::Uniform { fan_in: d_in } };
        let w = self.create(&format!("{name}.weight"), &[d_out, d_in], w_init, rng)?;
        let b = if bias {
            Some(self.create(&format!("{name}.bias"), &[d_out], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Linear::new(w, b))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// All parameters in name order.
    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    /// Names of parameters under a dotted group prefix such as `head.V`.
    pub fn group(&self, prefix: &str) -> Vec<String> {
        let dotted = format!("{prefix}.");
        self.vars
            .keys()
            .filter(|k| k.starts_with(&dotted))
            .cloned()
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place, keeping its identity for autograd.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}
