//! Prototype discovery: a shallow skip-connected encoder-decoder predicts a
//! K-way soft assignment of every feature-map pixel, and masked averaging
//! turns the assignment into K prototype vectors.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::Conv2d;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{flatten_pixels, Backbone};
use crate::config::MaskHeadConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::synthdata::Modality;

/// Minimum total mask weight a prototype column may carry.
pub const MIN_MASK_MASS: f64 = 1e-8;

/// Per-pixel prototype assignment probabilities, `(B, H*W, K)`; every
/// pixel row sums to one.
#[derive(Debug, Clone)]
pub struct MaskScores {
    pub m: Tensor,
    pub height: usize,
    pub width: usize,
}

impl MaskScores {
    pub fn new(m: Tensor, height: usize, width: usize) -> Result<Self> {
        let (_, hw, _) = m.dims3()?;
        if hw != height * width {
            return Err(Error::Shape(format!("{hw} mask rows for a {height}x{width} grid")));
        }
        Ok(Self { m, height, width })
    }

    pub fn num_prototypes(&self) -> usize {
        self.m.dim(2).unwrap_or(0)
    }

    /// `(B, K, H, W)` view.
    pub fn to_nchw(&self) -> Result<Tensor> {
        let (b, hw, k) = self.m.dims3()?;
        debug_assert_eq!(hw, self.height * self.width);
        Ok(self
            .m
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, k, self.height, self.width))?)
    }

    pub fn from_nchw(x: &Tensor) -> Result<Self> {
        let (_, _, h, w) = x.dims4()?;
        Self::new(flatten_pixels(x)?, h, w)
    }

    /// Largest deviation of a pixel row sum from one.
    pub fn row_sum_error(&self) -> Result<f64> {
        let sums = self.m.sum(D::Minus1)?.to_dtype(DType::F64)?;
        Ok((sums - 1.0)?.abs()?.max_all()?.to_scalar::<f64>()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Low,
    High,
}

/// Prototype matrix `A = [p^1; ...; p^K]`. The tensor is `(K, d)` for one
/// image or `(B, K, d)` for a batch.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub a: Tensor,
    pub level: Level,
}

impl PrototypeSet {
    pub fn num_prototypes(&self) -> usize {
        let r = self.a.rank();
        self.a.dims()[r - 2]
    }

    pub fn dim(&self) -> usize {
        *self.a.dims().last().unwrap()
    }

    /// Image `i` of a batched set.
    pub fn image(&self, i: usize) -> Result<PrototypeSet> {
        Ok(PrototypeSet {
            a: self.a.get(i)?,
            level: self.level,
        })
    }
}

/// Shallow U-Net mask head.
pub struct MaskHead {
    enc: Conv2d,
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    out: Conv2d,
    num_prototypes: usize,
}

impl MaskHead {
    pub fn new(
        cfg: &MaskHeadConfig,
        d: usize,
        num_prototypes: usize,
        zero_final: bool,
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = cfg.width;
        let enc = params.conv2d("pd.enc", d, w, 3, 1, false, rng)?;
        let down = (0..cfg.depth)
            .map(|i| params.conv2d(&format!("pd.down{i}"), w, w, 3, 1, false, rng))
            .collect::<Result<Vec<_>>>()?;
        let up = (0..cfg.depth)
            .map(|i| params.conv2d(&format!("pd.up{i}"), 2 * w, w, 3, 1, false, rng))
            .collect::<Result<Vec<_>>>()?;
        let out = params.conv2d("pd.out", w, num_prototypes, 1, 1, zero_final, rng)?;
        Ok(Self {
            enc,
            down,
            up,
            out,
            num_prototypes,
        })
    }

    pub fn num_prototypes(&self) -> usize {
        self.num_prototypes
    }

    /// Pre-normalization logits `(B, K, H, W)`.
    pub fn logits(&self, high: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = high.dims4()?;
        let depth = self.down.len();
        if h >> depth == 0 || w >> depth == 0 {
            return Err(Error::Shape(format!("{h}x{w} feature map too small for {depth} down blocks")));
        }
        let mut x = self.enc.forward(high)?.relu()?;
        let mut skips = Vec::with_capacity(depth);
        for conv in &self.down {
            skips.push(x.clone());
            x = conv.forward(&x.avg_pool2d(2)?)?.relu()?;
        }
        for (conv, skip) in self.up.iter().zip(skips.iter().rev()) {
            let (_, _, sh, sw) = skip.dims4()?;
            let up = upsample_nearest(&x, sh, sw)?;
            x = conv.forward(&Tensor::cat(&[&up, skip], 1)?)?.relu()?;
        }
        Ok(self.out.forward(&x)?)
    }

    /// Softmax over the K channel logits at every pixel.
    pub fn mask_scores(&self, high: &Tensor) -> Result<MaskScores> {
        if !high.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.is_finite() {
            return Err(Error::NonFinite("mask head input"));
        }
        let logits = self.logits(high)?;
        let check = logits.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !check.is_finite() {
            return Err(Error::NonFinite("mask logits"));
        }
        MaskScores::from_nchw(&softmax_channels(&logits)?)
    }
}

/// Nearest-neighbour resize of `(B, C, H, W)` to any target size, built
/// from index selection so it stays differentiable for uneven factors.
fn upsample_nearest(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let rows: Vec<u32> = (0..height).map(|i| (i * h / height) as u32).collect();
    let cols: Vec<u32> = (0..width).map(|j| (j * w / width) as u32).collect();
    let rows = Tensor::from_vec(rows, height, x.device())?;
    let cols = Tensor::from_vec(cols, width, x.device())?;
    Ok(x.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let e = logits.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

/// Mask-weighted mean of pixel features per prototype:
/// `p^k = sum_u M^k_u F_u / sum_u M^k_u`.
///
/// `features` is `(B, H*W, d)` (or `(H*W, d)`), `masks` `(B, H*W, K)`
/// (or `(H*W, K)`).
pub fn aggregate_prototypes(features: &Tensor, masks: &Tensor, level: Level) -> Result<PrototypeSet> {
    let single = features.rank() == 2;
    let (f, m) = if single {
        (features.unsqueeze(0)?, masks.unsqueeze(0)?)
    } else {
        (features.clone(), masks.clone())
    };
    let (b, hw, _) = f.dims3()?;
    let (mb, mhw, _) = m.dims3()?;
    if (b, hw) != (mb, mhw) {
        return Err(Error::Shape(format!(
            "features {:?} and masks {:?} disagree",
            f.dims(),
            m.dims()
        )));
    }
    let mass = m.sum(1)?; // (B, K)
    let masses = mass.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let k = m.dim(2)?;
    if let Some((i, &v)) = masses.iter().enumerate().find(|(_, &v)| !(v >= MIN_MASK_MASS)) {
        return Err(Error::DegeneratePrototype { index: i % k, mass: v });
    }
    let weighted = m.transpose(1, 2)?.contiguous()?.matmul(&f)?; // (B, K, d)
    let a = weighted.broadcast_div(&mass.unsqueeze(2)?)?;
    let a = if single { a.squeeze(0)? } else { a };
    Ok(PrototypeSet { a, level })
}

/// Averages a finer feature map down to the mask grid.
pub fn align_to_grid(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    if h % height != 0 || w % width != 0 || h / height != w / width {
        return Err(Error::Shape(format!("cannot pool {h}x{w} onto {height}x{width}")));
    }
    Ok(x.avg_pool2d(h / height)?)
}

/// Image-to-prototypes mapping: backbone, mask head, masked aggregation.
/// Low-level prototypes reuse the high-level masks on the low tap pooled to
/// the mask grid.
pub fn prototypes_from_image(
    backbone: &Backbone,
    head: &MaskHead,
    images: &Tensor,
    modality: Modality,
    level: Level,
) -> Result<PrototypeSet> {
    let single = images.rank() == 3;
    let images = if single { images.unsqueeze(0)? } else { images.clone() };
    let feats = backbone.extract(&images, modality)?;
    let masks = head.mask_scores(&feats.high)?;
    let source = match level {
        Level::High => feats.high_flat()?,
        Level::Low => flatten_pixels(&align_to_grid(&feats.low, masks.height, masks.width)?)?,
    };
    let set = aggregate_prototypes(&source, &masks.m, level)?;
    if single {
        Ok(set.image(0)?)
    } else {
        Ok(set)
    }
}

// ---------------------------------------------------------------------------
// Rigid transforms

/// Rigid transform of a channels-first grid. Parameters are expressed at
/// mask resolution; [`RigidTransform::apply_image`] rescales translations to
/// image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RigidTransform {
    Identity,
    HFlip,
    /// Shift by whole pixels with zero fill.
    Translate { dy: i64, dx: i64 },
    /// Clockwise quarter turns.
    Rotate90 { quarters: u8 },
}

impl RigidTransform {
    pub fn inverse(self) -> RigidTransform {
        match self {
            RigidTransform::Translate { dy, dx } => RigidTransform::Translate { dy: -dy, dx: -dx },
            RigidTransform::Rotate90 { quarters } => RigidTransform::Rotate90 {
                quarters: (4 - quarters % 4) % 4,
            },
            other => other,
        }
    }

    /// Exact round trip on every pixel (translation loses its border).
    pub fn is_lossless(self) -> bool {
        !matches!(self, RigidTransform::Translate { dy, dx } if dy != 0 || dx != 0)
    }

    fn validate(self, h: usize, w: usize) -> Result<()> {
        match self {
            RigidTransform::Translate { dy, dx } if dy.unsigned_abs() as usize >= h || dx.unsigned_abs() as usize >= w => Err(
                Error::Invalid(format!("translation ({dy}, {dx}) leaves nothing of a {h}x{w} grid")),
            ),
            RigidTransform::Rotate90 { quarters } if quarters >= 4 => {
                Err(Error::Invalid(format!("rotation by {quarters} quarter turns")))
            }
            _ => Ok(()),
        }
    }

    /// Applies the transform to `(B, C, H, W)`.
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.validate(h, w)?;
        match self {
            RigidTransform::Identity => Ok(x.clone()),
            RigidTransform::HFlip => flip(x, 3),
            RigidTransform::Translate { dy, dx } => {
                let y = shift(x, 2, dy)?;
                shift(&y, 3, dx)
            }
            RigidTransform::Rotate90 { quarters } => {
                let mut y = x.clone();
                for _ in 0..quarters {
                    y = flip(&y.transpose(2, 3)?.contiguous()?, 3)?;
                }
                Ok(y)
            }
        }
    }

    /// Applies the transform to images whose grid is `scale` times finer
    /// than the mask grid.
    pub fn apply_image(self, images: &Tensor, scale: usize) -> Result<Tensor> {
        match self {
            RigidTransform::Translate { dy, dx } => RigidTransform::Translate {
                dy: dy * scale as i64,
                dx: dx * scale as i64,
            }
            .apply(images),
            other => other.apply(images),
        }
    }

    /// `(H, W)` weights: one where the pixel survives `apply` followed by
    /// `inverse`, zero where it was lost to the translation border.
    pub fn valid_region(self, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![1.0; h * w];
        if let RigidTransform::Translate { dy, dx } = self {
            for r in 0..h {
                for c in 0..w {
                    let (sr, sc) = (r as i64 + dy, c as i64 + dx);
                    if sr < 0 || sr >= h as i64 || sc < 0 || sc >= w as i64 {
                        out[r * w + c] = 0.0;
                    }
                }
            }
        }
        out
    }
}

fn flip(x: &Tensor, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    let idx: Vec<u32> = (0..n as u32).rev().collect();
    let idx = Tensor::from_vec(idx, n, x.device())?;
    Ok(x.index_select(&idx, dim)?)
}

fn shift(x: &Tensor, dim: usize, by: i64) -> Result<Tensor> {
    let n = x.dim(dim)?;
    let k = by.unsigned_abs() as usize;
    if by == 0 {
        return Ok(x.clone());
    }
    if by > 0 {
        Ok(x.narrow(dim, 0, n - k)?.pad_with_zeros(dim, k, 0)?)
    } else {
        Ok(x.narrow(dim, k, n - k)?.pad_with_zeros(dim, 0, k)?)
    }
}

pub fn transform_image(images: &Tensor, r: RigidTransform, scale: usize) -> Result<Tensor> {
    r.apply_image(images, scale)
}

/// Maps masks predicted on a transformed image back onto the original grid.
pub fn invert_mask_transform(masks: &MaskScores, r: RigidTransform) -> Result<MaskScores> {
    let back = r.inverse().apply(&masks.to_nchw()?)?;
    MaskScores::from_nchw(&back)
}

/// Applies `r` to masks at mask resolution.
pub fn transform_masks(masks: &MaskScores, r: RigidTransform) -> Result<MaskScores> {
    MaskScores::from_nchw(&r.apply(&masks.to_nchw()?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn head(k: usize, zero_final: bool) -> MaskHead {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::new(DType::F64, Device::Cpu);
        MaskHead::new(&MaskHeadConfig { width: 8, depth: 2 }, 5, k, zero_final, &mut ps, &mut rng).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        t((0..n).map(|_| rng.random_range(-2.0..2.0)).collect(), shape)
    }

    #[test]
    fn masks_are_row_stochastic() {
        let m = head(6, false).mask_scores(&random(&[3, 5, 18, 9], 1)).unwrap();
        assert_eq!(m.m.dims(), &[3, 162, 6]);
        assert!(m.row_sum_error().unwrap() < 1e-6);
        let v = m.m.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn zero_final_layer_gives_uniform_masks() {
        let m = head(4, true).mask_scores(&random(&[1, 5, 18, 9], 2)).unwrap();
        let v = m.m.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| (x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut x = vec![0.0; 5 * 18 * 9];
        x[3] = f64::NAN;
        assert!(matches!(
            head(3, false).mask_scores(&t(x, &[1, 5, 18, 9])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn uniform_masks_give_global_mean() {
        let f = random(&[6, 3], 3);
        let m = Tensor::full(0.25f64, (6, 4), &Device::Cpu).unwrap();
        let p = aggregate_prototypes(&f, &m, Level::High).unwrap();
        let mean = f.mean(0).unwrap().to_vec1::<f64>().unwrap();
        for row in p.a.to_vec2::<f64>().unwrap() {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_column_selects_pixel() {
        let f = random(&[3, 2], 5);
        // Column 0 hot on pixel 1; column 1 covers pixels 0 and 2.
        let m = t(vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0], &[3, 2]);
        let p = aggregate_prototypes(&f, &m, Level::High).unwrap().a.to_vec2::<f64>().unwrap();
        assert_eq!(p[0], f.get(1).unwrap().to_vec1::<f64>().unwrap());
    }

    #[test]
    fn weighted_mean_hand_value() {
        let f = t(vec![0.0, 2.0], &[2, 1]);
        let m = t(vec![0.25, 0.75, 0.75, 0.25], &[2, 2]);
        let p = aggregate_prototypes(&f, &m, Level::High).unwrap().a.to_vec2::<f64>().unwrap();
        assert!((p[0][0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_column_raises() {
        let f = random(&[2, 2], 6);
        let m = t(vec![1.0, 0.0, 1.0, 0.0], &[2, 2]);
        assert!(matches!(
            aggregate_prototypes(&f, &m, Level::High),
            Err(Error::DegeneratePrototype { index: 1, .. })
        ));
    }

    #[test]
    fn aggregation_is_permutation_equivariant() {
        let f = random(&[2, 7, 3], 7);
        let raw = random(&[2, 7, 4], 8).exp().unwrap();
        let m = raw.broadcast_div(&raw.sum_keepdim(2).unwrap()).unwrap();
        let perm = [2u32, 0, 3, 1];
        let idx = Tensor::new(&perm, &Device::Cpu).unwrap();
        let a = aggregate_prototypes(&f, &m, Level::High).unwrap().a;
        let b = aggregate_prototypes(&f, &m.index_select(&idx, 2).unwrap(), Level::High).unwrap().a;
        let a_perm = a.index_select(&idx, 1).unwrap();
        let d = (a_perm - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
    }

    fn one_hot_masks(h: usize, w: usize, k: usize, hot: usize) -> MaskScores {
        let mut v = vec![0.0; h * w * k];
        for u in 0..h * w {
            v[u * k + if u == hot { 1 } else { 0 }] = 1.0;
        }
        MaskScores::new(t(v, &[1, h * w, k]), h, w).unwrap()
    }

    #[test]
    fn identity_and_hflip_round_trips() {
        let m = one_hot_masks(6, 3, 2, 4);
        let orig = m.m.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for r in [
            RigidTransform::Identity,
            RigidTransform::HFlip,
            RigidTransform::Rotate90 { quarters: 1 },
            RigidTransform::Rotate90 { quarters: 3 },
        ] {
            let back = invert_mask_transform(&transform_masks(&m, r).unwrap(), r).unwrap();
            assert_eq!(back.m.flatten_all().unwrap().to_vec1::<f64>().unwrap(), orig, "{r:?}");
        }
        let same = transform_masks(&m, RigidTransform::Identity).unwrap();
        assert_eq!(same.m.flatten_all().unwrap().to_vec1::<f64>().unwrap(), orig);
        let twice = transform_masks(&transform_masks(&m, RigidTransform::HFlip).unwrap(), RigidTransform::HFlip).unwrap();
        assert_eq!(twice.m.flatten_all().unwrap().to_vec1::<f64>().unwrap(), orig);
    }

    #[test]
    fn rotate_quarter_moves_pixels_clockwise() {
        // 2x3 grid with values 0..6; a clockwise turn gives a 3x2 grid.
        let x = t((0..6).map(|v| v as f64).collect(), &[1, 1, 2, 3]);
        let y = RigidTransform::Rotate90 { quarters: 1 }.apply(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 3, 2]);
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![3.0, 0.0, 4.0, 1.0, 5.0, 2.0]
        );
    }

    #[test]
    fn translate_by_one_round_trip_on_interior() {
        let (h, w) = (6, 4);
        let hot = 2 * w + 1;
        let m = one_hot_masks(h, w, 2, hot);
        let r = RigidTransform::Translate { dy: 1, dx: 0 };
        let moved = transform_masks(&m, r).unwrap();
        let mv = moved.m.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // Hot pixel moved one row down.
        assert_eq!(mv[(hot + w) * 2 + 1], 1.0);
        let back = invert_mask_transform(&moved, r).unwrap().m.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let orig = m.m.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let valid = r.valid_region(h, w);
        for u in 0..h * w {
            if valid[u] == 1.0 {
                assert_eq!(&back[u * 2..u * 2 + 2], &orig[u * 2..u * 2 + 2]);
            }
        }
        assert_eq!(valid.iter().filter(|&&v| v == 0.0).count(), w);
    }

    #[test]
    fn impossible_translation_rejected() {
        let m = one_hot_masks(3, 3, 2, 0);
        assert!(transform_masks(&m, RigidTransform::Translate { dy: 3, dx: 0 }).is_err());
    }

    #[test]
    fn image_translation_is_rescaled() {
        let img = random(&[1, 3, 8, 4], 9);
        let r = RigidTransform::Translate { dy: 1, dx: 0 };
        let a = r.apply_image(&img, 2).unwrap();
        let b = RigidTransform::Translate { dy: 2, dx: 0 }.apply(&img).unwrap();
        let d = (a - b).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
    }
}
