//! Attentive prototype embedding: a sigmoid-gated self-attention over the K
//! prototypes followed by a linear projection of the flattened result.

use candle_core::{Module, Tensor};
use candle_nn::{ops::sigmoid, Linear};
use rand_chacha::ChaCha8Rng;

use crate::config::ApeConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub struct Ape {
    query: Linear,
    key: Linear,
    value: Linear,
    mlp: Linear,
    num_prototypes: usize,
    d: usize,
    d_attn: usize,
    d_embed: usize,
}

impl Ape {
    pub fn new(
        cfg: &ApeConfig,
        d: usize,
        num_prototypes: usize,
        zero_output: bool,
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            query: params.linear("ape.query", d, cfg.d_attn, false, false, rng)?,
            key: params.linear("ape.key", d, cfg.d_attn, false, false, rng)?,
            value: params.linear("ape.value", d, cfg.d_value, false, false, rng)?,
            mlp: params.linear("ape.mlp", num_prototypes * cfg.d_value, cfg.d_embed, true, zero_output, rng)?,
            num_prototypes,
            d,
            d_attn: cfg.d_attn,
            d_embed: cfg.d_embed,
        })
    }

    pub fn from_layers(query: Linear, key: Linear, value: Linear, mlp: Linear, num_prototypes: usize) -> Result<Self> {
        let d = query.weight().dim(1)?;
        let d_attn = query.weight().dim(0)?;
        let d_embed = mlp.weight().dim(0)?;
        Ok(Self {
            query,
            key,
            value,
            mlp,
            num_prototypes,
            d,
            d_attn,
            d_embed,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.d_embed
    }

    fn batched(&self, a: &Tensor) -> Result<(Tensor, bool)> {
        let single = a.rank() == 2;
        let a = if single { a.unsqueeze(0)? } else { a.clone() };
        let (_, k, d) = a.dims3()?;
        if k != self.num_prototypes || d != self.d {
            return Err(Error::Shape(format!(
                "attentive embedding expects (.., {}, {}) prototypes, got {:?}",
                self.num_prototypes,
                self.d,
                a.dims()
            )));
        }
        Ok((a, single))
    }

    /// `sigma(Q K^T / sqrt(d_a))`, `(B, K, K)`.
    pub fn gate(&self, a: &Tensor) -> Result<Tensor> {
        let (a, _) = self.batched(a)?;
        self.gate_batched(&a)
    }

    fn gate_batched(&self, a: &Tensor) -> Result<Tensor> {
        let q = self.query.forward(a)?;
        let k = self.key.forward(a)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (self.d_attn as f64).sqrt())?;
        Ok(sigmoid(&scores)?)
    }

    /// `W_mlp(flatten(B V))` for prototypes `(K, d)` or `(B, K, d)`.
    pub fn forward(&self, a: &Tensor) -> Result<Tensor> {
        let (a, single) = self.batched(a)?;
        let gate = self.gate_batched(&a)?;
        let mixed = gate.matmul(&self.value.forward(&a)?)?; // (B, K, d_v)
        let b = mixed.dim(0)?;
        let out = self.mlp.forward(&mixed.reshape((b, ()))?)?;
        Ok(if single { out.squeeze(0)? } else { out })
    }
}

/// `[APE(A); g]` along the last dimension.
pub fn final_embedding(ape_output: &Tensor, global: &Tensor) -> Result<Tensor> {
    Ok(Tensor::cat(&[ape_output, global], ape_output.rank() - 1)?)
}
