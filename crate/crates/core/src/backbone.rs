//! Two-stream convolutional feature extractor: a modality-specific head
//! stage followed by a shared tail.

use candle_core::{Module, Tensor};
use candle_nn::Conv2d;
use rand_chacha::ChaCha8Rng;

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::synthdata::Modality;

/// Spatial features of a batch of images, channels-first.
#[derive(Debug, Clone)]
pub struct FeatureMaps {
    /// `(B, d_low, H', W')`, the low-level tap.
    pub low: Tensor,
    /// `(B, d, H, W)`, the shared tail output.
    pub high: Tensor,
    /// `(B, d)`, spatial mean of `high`.
    pub global: Tensor,
}

/// `(B, C, H, W)` to pixel-major `(B, H*W, C)`.
pub fn flatten_pixels(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

impl FeatureMaps {
    pub fn high_flat(&self) -> Result<Tensor> {
        flatten_pixels(&self.high)
    }

    pub fn low_flat(&self) -> Result<Tensor> {
        flatten_pixels(&self.low)
    }

    pub fn batch_size(&self) -> usize {
        self.high.dim(0).unwrap_or(0)
    }

    /// Splits along the batch at `at`.
    pub fn split(&self, at: usize) -> Result<(FeatureMaps, FeatureMaps)> {
        let n = self.batch_size();
        let part = |start, len| -> Result<FeatureMaps> {
            Ok(FeatureMaps {
                low: self.low.narrow(0, start, len)?,
                high: self.high.narrow(0, start, len)?,
                global: self.global.narrow(0, start, len)?,
            })
        };
        Ok((part(0, at)?, part(at, n - at)?))
    }
}

const NORM_GROUPS: usize = 4;
const NORM_EPS: f64 = 1e-5;

/// Per-sample group normalization without learned scale or shift.
pub fn group_normalize(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let groups = if c % NORM_GROUPS == 0 { NORM_GROUPS } else { 1 };
    let g = x.reshape((b, groups, (c / groups) * h * w))?;
    let centered = g.broadcast_sub(&g.mean_keepdim(2)?)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let out = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
    Ok(out.reshape((b, c, h, w))?)
}

fn conv_relu(conv: &Conv2d, x: &Tensor) -> Result<Tensor> {
    Ok(group_normalize(&conv.forward(x)?)?.relu()?)
}

pub struct Backbone {
    head_v: Conv2d,
    head_i: Conv2d,
    /// Shared stages; the same layers serve both modalities.
    tail: Vec<Conv2d>,
    low_tap: usize,
    image_hw: (usize, usize),
}

impl Backbone {
    /// Registers parameter groups `head.V`, `head.I` and `tail`.
    pub fn new(
        cfg: &BackboneConfig,
        image_hw: (usize, usize),
        zero_final: bool,
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let head_v = params.conv2d("head.V.conv", 3, cfg.d_low, 3, 1, false, rng)?;
        let head_i = params.conv2d("head.I.conv", 3, cfg.d_low, 3, 1, false, rng)?;
        let tail = vec![
            params.conv2d("tail.stage2", cfg.d_low, cfg.d_mid, 3, 2, false, rng)?,
            params.conv2d("tail.stage3", cfg.d_mid, cfg.d, 3, 1, false, rng)?,
            params.conv2d("tail.stage4", cfg.d, cfg.d, 3, 1, zero_final, rng)?,
        ];
        Ok(Self {
            head_v,
            head_i,
            tail,
            low_tap: cfg.low_tap,
            image_hw,
        })
    }

    /// Feature-map size `(H, W)` for the configured image size.
    pub fn feature_hw(&self) -> (usize, usize) {
        let (h, w) = self.image_hw;
        ((h + 1) / 2, (w + 1) / 2)
    }

    fn head(&self, modality: Modality) -> &Conv2d {
        match modality {
            Modality::Visible => &self.head_v,
            Modality::Infrared => &self.head_i,
        }
    }

    /// Runs one modality's images `(B, 3, H, W)` through its head and the
    /// shared tail.
    pub fn extract(&self, images: &Tensor, modality: Modality) -> Result<FeatureMaps> {
        self.check_shape(images)?;
        self.extract_any_size(images, modality)
    }

    pub(crate) fn extract_any_size(&self, images: &Tensor, modality: Modality) -> Result<FeatureMaps> {
        let head = conv_relu(self.head(modality), images)?;
        self.run_tail(head)
    }

    /// Visible and infrared batches share one tail pass; the result holds the
    /// visible rows first.
    pub fn extract_pair(&self, visible: &Tensor, infrared: &Tensor) -> Result<FeatureMaps> {
        self.check_shape(visible)?;
        self.check_shape(infrared)?;
        self.extract_pair_any_size(visible, infrared)
    }

    pub(crate) fn extract_pair_any_size(&self, visible: &Tensor, infrared: &Tensor) -> Result<FeatureMaps> {
        let hv = conv_relu(&self.head_v, visible)?;
        let hi = conv_relu(&self.head_i, infrared)?;
        self.run_tail(Tensor::cat(&[&hv, &hi], 0)?)
    }

    fn run_tail(&self, head: Tensor) -> Result<FeatureMaps> {
        let s2 = conv_relu(&self.tail[0], &head)?;
        let s3 = conv_relu(&self.tail[1], &s2)?;
        let high = conv_relu(&self.tail[2], &s3)?;
        let global = high.mean((2, 3))?;
        let low = if self.low_tap == 1 { head } else { s2 };
        Ok(FeatureMaps { low, high, global })
    }

    fn check_shape(&self, images: &Tensor) -> Result<()> {
        let dims = images.dims();
        let (h, w) = self.image_hw;
        if dims.len() != 4 || dims[1] != 3 || dims[2] != h || dims[3] != w {
            return Err(Error::Shape(format!("expected (B, 3, {h}, {w}) images, got {dims:?}")));
        }
        Ok(())
    }
}
