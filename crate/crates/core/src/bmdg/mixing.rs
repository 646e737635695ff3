//! Intermediate-domain construction from two modalities' prototype sets.

use candle_core::Tensor;
use rand::Rng;

use crate::error::{Error, Result};

fn check_step(t: usize, total: usize) -> Result<()> {
    if total == 0 && t > 0 {
        return Err(Error::Invalid(format!("step {t} with zero total steps")));
    }
    if t > total {
        return Err(Error::Invalid(format!("step {t} beyond total {total}")));
    }
    Ok(())
}

fn batched_dims(own: &Tensor, other: &Tensor) -> Result<(usize, usize)> {
    if own.dims() != other.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", own.dims(), other.dims())));
    }
    match own.dims() {
        [k, _] => Ok((1, *k)),
        [b, k, _] => Ok((*b, *k)),
        d => Err(Error::Shape(format!("prototype sets must be (K, d) or (B, K, d), got {d:?}"))),
    }
}

/// Draws one uniform number in `[0, 1)` per prototype row, image-major.
pub fn draw_uniforms(rows: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..rows).map(|_| rng.random::<f64>()).collect()
}

/// Which rows come from the other set: row `k` is kept when `t/T <= u_k`.
pub fn swap_pattern(uniforms: &[f64], t: usize, total: usize) -> Result<Vec<bool>> {
    check_step(t, total)?;
    if total == 0 {
        return Ok(vec![false; uniforms.len()]);
    }
    let ratio = t as f64 / total as f64;
    Ok(uniforms.iter().map(|&u| ratio > u).collect())
}

/// Row-wise selection between `own` and `other` following `swap`
/// (image-major over `(B, K)`). Rows are copied, never blended.
pub fn select_rows(own: &Tensor, other: &Tensor, swap: &[bool]) -> Result<Tensor> {
    let (b, k) = batched_dims(own, other)?;
    if swap.len() != b * k {
        return Err(Error::Shape(format!("{} swap flags for {b}x{k} rows", swap.len())));
    }
    if swap.iter().all(|&s| !s) {
        return Ok(own.clone());
    }
    if swap.iter().all(|&s| s) {
        return Ok(other.clone());
    }
    let flags: Vec<u8> = swap.iter().map(|&s| s as u8).collect();
    let mut shape = own.dims().to_vec();
    *shape.last_mut().unwrap() = 1;
    let mask = Tensor::from_vec(flags, shape, own.device())?.broadcast_as(own.shape())?;
    Ok(mask.where_cond(other, own)?)
}

/// Random prototype exchange: independently for each row, keep the row of
/// `own` when `t/T <= u` with `u ~ U[0, 1)`, otherwise take the row of
/// `other`.
pub fn mix_prototypes(own: &Tensor, other: &Tensor, t: usize, total: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let (b, k) = batched_dims(own, other)?;
    let u = draw_uniforms(b * k, rng);
    mix_with_uniforms(own, other, t, total, &u)
}

/// [`mix_prototypes`] with pre-drawn uniforms.
pub fn mix_with_uniforms(own: &Tensor, other: &Tensor, t: usize, total: usize, uniforms: &[f64]) -> Result<Tensor> {
    let swap = swap_pattern(uniforms, t, total)?;
    select_rows(own, other, &swap)
}

/// Convex blend `(1 - t/T) own + (t/T) other` of the full prototype sets.
pub fn whole_mixup(own: &Tensor, other: &Tensor, t: usize, total: usize) -> Result<Tensor> {
    batched_dims(own, other)?;
    check_step(t, total)?;
    if t == 0 {
        return Ok(own.clone());
    }
    if t == total {
        return Ok(other.clone());
    }
    let alpha = t as f64 / total as f64;
    Ok(((own * (1.0 - alpha))? + (other * alpha)?)?)
}
