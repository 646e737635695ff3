#![allow(dead_code)]

use bmdg::synthdata::{render_dataset, Dataset, DatasetSpec};
use bmdg::TrainConfig;
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random f64 tensor with entries uniform in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Rows of a `(B, HW, K)` tensor that sum to one along the last axis.
pub fn stochastic(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let k = *shape.last().unwrap();
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|_| 0.1 + rng.random::<f64>()).collect();
    for row in v.chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn scalar_of(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Backprop gradient against central differences. Returns
/// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
pub fn gradient_error(x: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(x).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    let analytic: Vec<f64> = grads
        .get(var.as_tensor())
        .map(|g| g.flatten_all().unwrap().to_vec1().unwrap())
        .unwrap_or_else(|| vec![0.0; x.elem_count()]);
    let base: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            scalar_of(&f(&Tensor::from_vec(v, x.dims(), &Device::Cpu).unwrap()))
        };
        numeric.push((eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP));
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    assert!(scale > 1e-8, "gradient vanishes; the check would be vacuous");
    norm(&diff) / scale
}

/// Small synthetic benchmark held in memory.
pub fn small_dataset(identities: usize, images: usize, seed: u64) -> Dataset {
    let spec = DatasetSpec {
        num_identities: identities,
        images_per_identity_per_modality: images,
        seed,
        ..DatasetSpec::default()
    };
    Dataset::from_rendered(&render_dataset(&spec).unwrap()).unwrap()
}

/// Tiny model and schedule for fast end-to-end runs.
pub fn tiny_config(epochs: usize, steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        num_steps: steps,
        num_prototypes: 3,
        batches_per_epoch: Some(2),
        checkpoint_every: 1,
        ..TrainConfig::default()
    };
    cfg.batch.identities = 2;
    cfg.batch.per_identity = 2;
    cfg.backbone.d_low = 8;
    cfg.backbone.d_mid = 8;
    cfg.backbone.d = 8;
    cfg.mask_head.width = 8;
    cfg.ape.d_attn = 8;
    cfg.ape.d_value = 8;
    cfg.ape.d_embed = 8;
    cfg.mmd.every = 1;
    cfg.mmd.identities = 2;
    cfg.mmd.images_per_identity = 2;
    cfg
}
