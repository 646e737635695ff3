//! The full network and the per-batch training objective.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Linear;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ape::{final_embedding, Ape};
use super::mixing::{draw_uniforms, mix_with_uniforms, whole_mixup};
use crate::backbone::{flatten_pixels, Backbone};
use crate::config::{Directionality, MixingMode, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{
    loss_compact, loss_diverse, loss_equivariance, loss_hc, loss_lc, loss_part_id, loss_reid, LossTerms,
    PartClassifierBank,
};
use crate::params::ParamStore;
use crate::protodisc::{align_to_grid, aggregate_prototypes, invert_mask_transform, Level, MaskHead, MaskScores, RigidTransform};
use crate::synthdata::{Dataset, Modality};

pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

/// Stream of the parameter-initialization generator.
pub const INIT_STREAM: u64 = 1;

/// Normalized CHW floats of one 8-bit HWC image.
pub fn normalize_image(pixels: &[u8], height: usize, width: usize) -> Vec<f32> {
    let mut out = vec![0f32; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let v = pixels[(y * width + x) * 3 + c] as f32 / 255.0;
                out[c * height * width + y * width + x] = (v - PIXEL_MEAN) / PIXEL_STD;
            }
        }
    }
    out
}

/// `(N, 3, H, W)` tensor of the given dataset images.
pub fn dataset_images(dataset: &Dataset, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = (dataset.height, dataset.width);
    let mut buf = Vec::with_capacity(indices.len() * 3 * h * w);
    for &i in indices {
        buf.extend(normalize_image(&dataset.pixels[i], h, w));
    }
    Ok(Tensor::from_vec(buf, (indices.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Forward quantities of a visible/infrared batch pair (visible rows first).
pub struct Encoded {
    pub masks: MaskScores,
    /// `(2B, K, d)`.
    pub high: Tensor,
    /// `(2B, K, d_low)`.
    pub low: Tensor,
    /// `(2B, H*W, d)`.
    pub high_flat: Tensor,
    /// `(2B, d)`.
    pub global: Tensor,
    /// `(2B, d_e + d)`.
    pub embedding: Tensor,
}

/// Every random choice of one training step, drawn before the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraws {
    pub mix_visible: Vec<f64>,
    pub mix_infrared: Vec<f64>,
    pub keep: Vec<bool>,
    pub transform: RigidTransform,
}

impl StepDraws {
    pub fn sample(rng: &mut ChaCha8Rng, batch: usize, num_prototypes: usize, bank: &PartClassifierBank) -> Self {
        let mix_visible = draw_uniforms(batch * num_prototypes, rng);
        let mix_infrared = draw_uniforms(batch * num_prototypes, rng);
        let keep = bank.sample_keep(rng);
        let transform = if rng.random::<bool>() {
            RigidTransform::HFlip
        } else {
            let shifts = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
            let (dy, dx) = shifts[rng.random_range(0..shifts.len())];
            RigidTransform::Translate { dy, dx }
        };
        Self {
            mix_visible,
            mix_infrared,
            keep,
            transform,
        }
    }

    /// Draws that leave every stochastic component inert.
    pub fn neutral(batch: usize, num_prototypes: usize) -> Self {
        Self {
            mix_visible: vec![0.5; batch * num_prototypes],
            mix_infrared: vec![0.5; batch * num_prototypes],
            keep: vec![true; num_prototypes],
            transform: RigidTransform::Identity,
        }
    }
}

pub struct Model {
    /// Resolved configuration the model was built from.
    pub config: TrainConfig,
    pub num_identities: usize,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub mask_head: MaskHead,
    pub ape: Ape,
    pub id_classifier: Linear,
    pub part_bank: PartClassifierBank,
}

impl Model {
    pub fn new(config: &TrainConfig, num_identities: usize) -> Result<Self> {
        Self::with_dtype(config, num_identities, DType::F32, Device::Cpu)
    }

    pub fn with_dtype(config: &TrainConfig, num_identities: usize, dtype: DType, device: Device) -> Result<Self> {
        config.validate()?;
        if num_identities < 2 {
            return Err(Error::Invalid("training needs at least two identities".into()));
        }
        let config = config.resolved();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(INIT_STREAM);
        let mut params = ParamStore::new(dtype, device);
        let k = config.num_prototypes;
        let d = config.backbone.d;
        let image_hw = (config.image.height, config.image.width);
        let backbone = Backbone::new(&config.backbone, image_hw, false, &mut params, &mut rng)?;
        let mask_head = MaskHead::new(&config.mask_head, d, k, false, &mut params, &mut rng)?;
        let ape = Ape::new(&config.ape, d, k, false, &mut params, &mut rng)?;
        let id_classifier = params.linear("id_cls", config.ape.d_embed + d, num_identities, true, false, &mut rng)?;
        let part_bank = PartClassifierBank::new(k, d, num_identities, config.loss.part_dropout, &mut params, &mut rng)?;
        Ok(Self {
            config,
            num_identities,
            params,
            backbone,
            mask_head,
            ape,
            id_classifier,
            part_bank,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.ape.d_embed + self.config.backbone.d
    }

    fn mask_scale(&self) -> usize {
        self.config.image.height / self.backbone.feature_hw().0
    }

    /// Prototypes, masks and embeddings of a paired batch.
    pub fn encode(&self, visible: &Tensor, infrared: &Tensor) -> Result<Encoded> {
        let feats = self.backbone.extract_pair(visible, infrared)?;
        self.encode_features(feats)
    }

    fn encode_features(&self, feats: crate::backbone::FeatureMaps) -> Result<Encoded> {
        let masks = self.mask_head.mask_scores(&feats.high)?;
        let high_flat = feats.high_flat()?;
        let high = aggregate_prototypes(&high_flat, &masks.m, Level::High)?.a;
        let low_grid = align_to_grid(&feats.low, masks.height, masks.width)?;
        let low = aggregate_prototypes(&flatten_pixels(&low_grid)?, &masks.m, Level::Low)?.a;
        let embedding = final_embedding(&self.ape.forward(&high)?, &feats.global)?;
        Ok(Encoded {
            masks,
            high,
            low,
            high_flat,
            global: feats.global,
            embedding,
        })
    }

    /// Inference embeddings `[APE(A); g]` of single-modality images.
    pub fn embed(&self, images: &Tensor, modality: Modality) -> Result<Tensor> {
        let feats = self.backbone.extract(images, modality)?;
        let masks = self.mask_head.mask_scores(&feats.high)?;
        let high = aggregate_prototypes(&feats.high_flat()?, &masks.m, Level::High)?.a;
        final_embedding(&self.ape.forward(&high)?, &feats.global)
    }

    pub fn masks(&self, images: &Tensor, modality: Modality) -> Result<MaskScores> {
        let feats = self.backbone.extract(images, modality)?;
        self.mask_head.mask_scores(&feats.high)
    }

    /// Embeddings of dataset images as `f64` rows, computed in chunks. All
    /// images must share the modality.
    pub fn embed_indices(&self, dataset: &Dataset, indices: &[usize], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(indices.len());
        for part in indices.chunks(chunk.max(1)) {
            let modality = dataset.entries[part[0]].modality;
            if part.iter().any(|&i| dataset.entries[i].modality != modality) {
                return Err(Error::Invalid("embedding chunk mixes modalities".into()));
            }
            let x = dataset_images(dataset, part, self.dtype(), self.device())?;
            let e = self.embed(&x, modality)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            out.extend(e);
        }
        Ok(out)
    }

    /// Terms shared by every variant of the objective.
    fn part_terms(
        &self,
        enc: &Encoded,
        visible: &Tensor,
        infrared: &Tensor,
        labels2: &[u32],
        draws: &StepDraws,
    ) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor, Tensor)> {
        let tau = self.config.loss.tau;
        let lc = loss_lc(&enc.low, tau)?;
        let hc = loss_hc(&enc.high, labels2, tau)?;
        let mut c = loss_compact(&enc.high_flat, &enc.masks.m, &enc.high)?;
        if self.config.loss.compact_pixel_mean {
            c = (c / enc.high_flat.dim(1)? as f64)?;
        }
        let vc = loss_diverse(&enc.masks.m)?;
        let p = loss_part_id(&enc.high, labels2, &self.part_bank, Some(&draws.keep))?;
        let eq = if draws.transform == RigidTransform::Identity {
            crate::losses::zero(self.dtype(), self.device())?
        } else {
            let r = draws.transform;
            let scale = self.mask_scale();
            let tv = r.apply_image(visible, scale)?;
            let ti = r.apply_image(infrared, scale)?;
            let feats = self.backbone.extract_pair_any_size(&tv, &ti)?;
            let moved = self.mask_head.mask_scores(&feats.high)?;
            let restored = invert_mask_transform(&moved, r)?;
            let valid = r.valid_region(enc.masks.height, enc.masks.width);
            loss_equivariance(&enc.masks.m, &restored.m, Some(&valid))?
        };
        Ok((lc, hc, c, vc, p, eq))
    }

    fn check_batch(&self, visible: &Tensor, labels: &[u32]) -> Result<usize> {
        let b = visible.dim(0)?;
        if labels.len() != b {
            return Err(Error::Shape(format!("{} labels for {b} image pairs", labels.len())));
        }
        Ok(b)
    }

    /// Full objective at step `t`: real embeddings, intermediates built by
    /// the configured mixing and directionality, and every auxiliary term.
    pub fn objective(
        &self,
        visible: &Tensor,
        infrared: &Tensor,
        labels: &[u32],
        t: usize,
        draws: &StepDraws,
    ) -> Result<LossTerms> {
        let b = self.check_batch(visible, labels)?;
        let total = self.config.num_steps;
        let mode = self.config.directionality_mode();
        if mode == Directionality::SingleStep && t > 0 {
            return Err(Error::Invalid(format!("step {t} in single-step training")));
        }
        let enc = self.encode(visible, infrared)?;
        let emb_v = enc.embedding.narrow(0, 0, b)?;
        let emb_i = enc.embedding.narrow(0, b, b)?;
        let (mid_v, mid_i) = if mode == Directionality::SingleStep {
            (emb_v.clone(), emb_i.clone())
        } else {
            let parts_v = enc.high.narrow(0, 0, b)?;
            let parts_i = enc.high.narrow(0, b, b)?;
            let global_v = enc.global.narrow(0, 0, b)?;
            let global_i = enc.global.narrow(0, b, b)?;
            let mix = |own: &Tensor, other: &Tensor, u: &[f64]| -> Result<Tensor> {
                match self.config.mixing {
                    MixingMode::PrototypeExchange => mix_with_uniforms(own, other, t, total, u),
                    MixingMode::WholeMixup => whole_mixup(own, other, t, total),
                }
            };
            let last = t == total;
            let (mid_global_v, mid_global_i) = if last { (&global_i, &global_v) } else { (&global_v, &global_i) };
            match (mode.builds_visible(), mode.builds_infrared()) {
                (true, true) => {
                    let mixed = Tensor::cat(
                        &[mix(&parts_v, &parts_i, &draws.mix_visible)?, mix(&parts_i, &parts_v, &draws.mix_infrared)?],
                        0,
                    )?;
                    let out = self.ape.forward(&mixed)?;
                    (
                        final_embedding(&out.narrow(0, 0, b)?, mid_global_v)?,
                        final_embedding(&out.narrow(0, b, b)?, mid_global_i)?,
                    )
                }
                (true, false) => {
                    let out = self.ape.forward(&mix(&parts_v, &parts_i, &draws.mix_visible)?)?;
                    (final_embedding(&out, mid_global_v)?, emb_i.clone())
                }
                (false, true) => {
                    let out = self.ape.forward(&mix(&parts_i, &parts_v, &draws.mix_infrared)?)?;
                    (emb_v.clone(), final_embedding(&out, mid_global_i)?)
                }
                (false, false) => unreachable!("single step handled above"),
            }
        };
        let reid = loss_reid(
            &emb_v,
            &emb_i,
            &mid_v,
            &mid_i,
            labels,
            &self.id_classifier,
            self.config.loss.center_margin,
        )?;
        let labels2: Vec<u32> = labels.iter().chain(labels).copied().collect();
        let (lc, hc, c, vc, p, eq) = self.part_terms(&enc, visible, infrared, &labels2, draws)?;
        Ok(LossTerms {
            ce: reid.ce,
            cc: reid.cc,
            lc,
            hc,
            c,
            vc,
            p,
            eq,
        })
    }

    /// Single-step objective written without any mixing or step logic:
    /// every intermediate slot is filled by the real embedding.
    pub fn baseline_objective(
        &self,
        visible: &Tensor,
        infrared: &Tensor,
        labels: &[u32],
        draws: &StepDraws,
    ) -> Result<LossTerms> {
        let b = self.check_batch(visible, labels)?;
        let enc = self.encode(visible, infrared)?;
        let emb_v = enc.embedding.narrow(0, 0, b)?;
        let emb_i = enc.embedding.narrow(0, b, b)?;
        let reid = loss_reid(
            &emb_v,
            &emb_i,
            &emb_v,
            &emb_i,
            labels,
            &self.id_classifier,
            self.config.loss.center_margin,
        )?;
        let labels2: Vec<u32> = labels.iter().chain(labels).copied().collect();
        let (lc, hc, c, vc, p, eq) = self.part_terms(&enc, visible, infrared, &labels2, draws)?;
        Ok(LossTerms {
            ce: reid.ce,
            cc: reid.cc,
            lc,
            hc,
            c,
            vc,
            p,
            eq,
        })
    }

    /// Identity logits of embeddings.
    pub fn classify(&self, embeddings: &Tensor) -> Result<Tensor> {
        Ok(self.id_classifier.forward(embeddings)?)
    }
}
