//! Training configuration.
//!
//! Every table rejects unknown keys so a misspelled weight fails loudly
//! instead of silently falling back to its default.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How intermediate domains are built from the two modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directionality {
    Bidirectional,
    VToI,
    IToV,
    SingleStep,
}

impl Directionality {
    /// Whether visible-anchored intermediates `A_v^(t)` are built.
    pub fn builds_visible(self) -> bool {
        matches!(self, Directionality::Bidirectional | Directionality::VToI)
    }

    /// Whether infrared-anchored intermediates `A_i^(t)` are built.
    pub fn builds_infrared(self) -> bool {
        matches!(self, Directionality::Bidirectional | Directionality::IToV)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Directionality::Bidirectional => "bidirectional",
            Directionality::VToI => "v_to_i",
            Directionality::IToV => "i_to_v",
            Directionality::SingleStep => "single_step",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingMode {
    /// Whole prototype rows are swapped between modalities.
    PrototypeExchange,
    /// Convex blend of the full prototype matrices.
    WholeMixup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchConfig {
    /// Identities per batch (N_b).
    pub identities: usize,
    /// Images per identity per modality (N_p).
    pub per_identity: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            identities: 10,
            per_identity: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageConfig {
    pub height: usize,
    pub width: usize,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            height: 36,
            width: 18,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Channels of the modality-specific head stage.
    pub d_low: usize,
    /// Channels of the first shared stage.
    pub d_mid: usize,
    /// Channels of the final feature map.
    pub d: usize,
    /// Stage (1 or 2) whose output is used as the low-level feature tap.
    pub low_tap: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_low: 32,
            d_mid: 64,
            d: 128,
            low_tap: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskHeadConfig {
    pub width: usize,
    /// Number of down/up sampling blocks.
    pub depth: usize,
}

impl Default for MaskHeadConfig {
    fn default() -> Self {
        Self { width: 32, depth: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApeConfig {
    pub d_attn: usize,
    pub d_value: usize,
    /// Output width of the attentive embedding (d_e).
    pub d_embed: usize,
}

impl Default for ApeConfig {
    fn default() -> Self {
        Self {
            d_attn: 64,
            d_value: 64,
            d_embed: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_f: f64,
    pub lambda_v: f64,
    pub lambda_c: f64,
    pub lambda_i: f64,
    pub lambda_e: f64,
    pub tau: f64,
    pub center_margin: f64,
    pub part_dropout: f64,
    /// Divide the compactness term by the number of feature-map pixels.
    pub compact_pixel_mean: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_f: 0.1,
            lambda_v: 0.05,
            lambda_c: 0.2,
            lambda_i: 0.4,
            lambda_e: 0.5,
            tau: 0.1,
            center_margin: 0.3,
            part_dropout: 0.2,
            compact_pixel_mean: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Linear warm-up length in epochs. Derived from `epochs` when absent.
    pub warmup_epochs: Option<usize>,
    /// Epochs at which the learning rate is multiplied by the matching
    /// entry of `decay`. Derived from `epochs` when absent.
    pub milestones: Option<Vec<usize>>,
    pub decay: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            warmup_epochs: None,
            milestones: None,
            decay: vec![0.1, 0.01],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// First epoch of each step 1..=T. Uniform partition when absent.
    pub step_starts: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop_pad: usize,
    pub erase_prob: f64,
    /// Min and max erased area as a fraction of the image.
    pub erase_area: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_pad: 4,
            erase_prob: 0.5,
            erase_area: [0.02, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmdConfig {
    /// Measure the modality gap every this many epochs (0 disables).
    pub every: usize,
    pub identities: usize,
    pub images_per_identity: usize,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self {
            every: 1,
            identities: 50,
            images_per_identity: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Number of part prototypes (K).
    pub num_prototypes: usize,
    /// Number of intermediate steps (T). Zero trains the single-step baseline.
    pub num_steps: usize,
    pub directionality: Directionality,
    pub mixing: MixingMode,
    /// Batches per epoch. Defaults to one pass over the visible images.
    pub batches_per_epoch: Option<usize>,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub batch: BatchConfig,
    pub image: ImageConfig,
    pub backbone: BackboneConfig,
    pub mask_head: MaskHeadConfig,
    pub ape: ApeConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub augment: AugmentConfig,
    pub mmd: MmdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 180,
            num_prototypes: 6,
            num_steps: 4,
            directionality: Directionality::Bidirectional,
            mixing: MixingMode::PrototypeExchange,
            batches_per_epoch: None,
            checkpoint_every: 20,
            batch: BatchConfig::default(),
            image: ImageConfig::default(),
            backbone: BackboneConfig::default(),
            mask_head: MaskHeadConfig::default(),
            ape: ApeConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            augment: AugmentConfig::default(),
            mmd: MmdConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Effective intermediate-domain mode; `T = 0` always means single step.
    pub fn directionality_mode(&self) -> Directionality {
        if self.num_steps == 0 {
            Directionality::SingleStep
        } else {
            self.directionality
        }
    }

    /// Fills every derived field with its effective value.
    pub fn resolved(&self) -> TrainConfig {
        let mut cfg = self.clone();
        let scale = |reference_epoch: usize| -> usize {
            ((reference_epoch as f64) * (self.epochs as f64) / 180.0).round() as usize
        };
        if cfg.optim.milestones.is_none() {
            cfg.optim.milestones = Some(vec![scale(80), scale(120)]);
        }
        if cfg.optim.warmup_epochs.is_none() {
            cfg.optim.warmup_epochs = Some(scale(10).max(1).min(self.epochs));
        }
        if cfg.schedule.step_starts.is_none() {
            cfg.schedule.step_starts =
                Some(crate::bmdg::StepSchedule::uniform(self.epochs, self.num_steps).starts().to_vec());
        }
        cfg
    }

    /// SHA-256 of the resolved config, hex encoded.
    pub fn hash(&self) -> String {
        let text = self.resolved().to_toml_string();
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch.identities", self.batch.identities),
            ("batch.per_identity", self.batch.per_identity),
            ("image.height", self.image.height),
            ("image.width", self.image.width),
            ("backbone.d_low", self.backbone.d_low),
            ("backbone.d_mid", self.backbone.d_mid),
            ("backbone.d", self.backbone.d),
            ("mask_head.width", self.mask_head.width),
            ("ape.d_attn", self.ape.d_attn),
            ("ape.d_value", self.ape.d_value),
            ("ape.d_embed", self.ape.d_embed),
        ];
        for (key, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("`{key}` must be positive")));
            }
        }
        if self.num_prototypes < 2 {
            return Err(Error::Config(format!(
                "`num_prototypes` must be at least 2, got {}",
                self.num_prototypes
            )));
        }
        if !(1..=2).contains(&self.backbone.low_tap) {
            return Err(Error::Config("`backbone.low_tap` must be 1 or 2".into()));
        }
        if self.image.height % 2 != 0 || self.image.width % 2 != 0 {
            return Err(Error::Config("image height and width must be even".into()));
        }
        let l = &self.loss;
        for (key, value) in [
            ("loss.lambda_f", l.lambda_f),
            ("loss.lambda_v", l.lambda_v),
            ("loss.lambda_c", l.lambda_c),
            ("loss.lambda_i", l.lambda_i),
            ("loss.lambda_e", l.lambda_e),
            ("loss.center_margin", l.center_margin),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::Config(format!("`{key}` must be finite and nonnegative")));
            }
        }
        if !l.tau.is_finite() || l.tau <= 0.0 {
            return Err(Error::Config("`loss.tau` must be positive".into()));
        }
        if !(0.0..1.0).contains(&l.part_dropout) {
            return Err(Error::Config("`loss.part_dropout` must lie in [0, 1)".into()));
        }
        let o = &self.optim;
        if !o.lr.is_finite() || o.lr <= 0.0 {
            return Err(Error::Config("`optim.lr` must be positive".into()));
        }
        if let Some(ms) = &o.milestones {
            if ms.len() != o.decay.len() {
                return Err(Error::Config(
                    "`optim.milestones` and `optim.decay` must have equal length".into(),
                ));
            }
            if ms.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Config("`optim.milestones` must be nondecreasing".into()));
            }
        } else if o.decay.len() != 2 {
            return Err(Error::Config(
                "`optim.decay` needs two entries when milestones are derived".into(),
            ));
        }
        if let Some(starts) = &self.schedule.step_starts {
            crate::bmdg::StepSchedule::from_starts(starts.clone(), self.num_steps, self.epochs)
                .map_err(|e| Error::Config(format!("`schedule.step_starts`: {e}")))?;
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.erase_prob) {
            return Err(Error::Config("`augment.erase_prob` must lie in [0, 1]".into()));
        }
        if !(a.erase_area[0] > 0.0 && a.erase_area[0] <= a.erase_area[1] && a.erase_area[1] < 1.0) {
            return Err(Error::Config("`augment.erase_area` must satisfy 0 < min <= max < 1".into()));
        }
        Ok(())
    }
}
