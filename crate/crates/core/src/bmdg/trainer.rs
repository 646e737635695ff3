//! Training loop: identity-balanced batches, step schedule, optimizer,
//! metrics, modality-gap tracking and checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::inference::{embed_subset, modality_gap};
use super::checkpoint::{load_model, save_checkpoint, CheckpointMeta, RngState, VERSION};
use super::model::{normalize_image, Model, StepDraws};
use super::optim::Adam;
use super::schedule::{LrSchedule, StepSchedule};
use crate::config::{AugmentConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossValues, LossWeights};
use crate::synthdata::{sample_batch, Dataset, Modality};

pub const METRICS_FILE: &str = "metrics.csv";
pub const MMD_FILE: &str = "mmd.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.toml";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";
pub const DIVERGENCE_FILE: &str = "divergence.txt";

/// One row per optimizer step.
pub const METRICS_HEADER: &str = "epoch,step_t,ce,cc,lc,hc,c,vc,p,eq,total";

/// Stream of the data and step-draw generator.
pub const DATA_STREAM: u64 = 2;

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.safetensors")
}

/// Random crop from a zero-padded canvas and random erasing, in place on a
/// normalized CHW image.
pub fn augment_image(img: &mut [f32], height: usize, width: usize, cfg: &AugmentConfig, rng: &mut impl Rng) {
    let pad = cfg.crop_pad as i64;
    if pad > 0 {
        let oy = rng.random_range(-pad..=pad);
        let ox = rng.random_range(-pad..=pad);
        let src = img.to_vec();
        for c in 0..3 {
            for y in 0..height as i64 {
                for x in 0..width as i64 {
                    let (sy, sx) = (y + oy, x + ox);
                    let v = if sy >= 0 && sy < height as i64 && sx >= 0 && sx < width as i64 {
                        src[c * height * width + sy as usize * width + sx as usize]
                    } else {
                        0.0
                    };
                    img[c * height * width + y as usize * width + x as usize] = v;
                }
            }
        }
    }
    if rng.random::<f64>() < cfg.erase_prob {
        let area = rng.random_range(cfg.erase_area[0]..=cfg.erase_area[1]) * (height * width) as f64;
        let aspect = rng.random_range((0.3f64).ln()..(3.3f64).ln()).exp();
        let eh = ((area * aspect).sqrt().round() as usize).clamp(1, height);
        let ew = ((area / aspect).sqrt().round() as usize).clamp(1, width);
        let y0 = rng.random_range(0..=height - eh);
        let x0 = rng.random_range(0..=width - ew);
        for c in 0..3 {
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    img[c * height * width + y * width + x] = 0.0;
                }
            }
        }
    }
}

fn batch_tensor(
    dataset: &Dataset,
    indices: &[usize],
    augment: &AugmentConfig,
    rng: &mut ChaCha8Rng,
    model: &Model,
) -> Result<Tensor> {
    let (h, w) = (dataset.height, dataset.width);
    let mut buf = Vec::with_capacity(indices.len() * 3 * h * w);
    for &i in indices {
        let mut img = normalize_image(&dataset.pixels[i], h, w);
        augment_image(&mut img, h, w, augment, rng);
        buf.extend(img);
    }
    Ok(Tensor::from_vec(buf, (indices.len(), 3, h, w), model.device())?.to_dtype(model.dtype())?)
}

/// A prepared training batch with all its random draws.
pub struct PreparedBatch {
    pub visible: Tensor,
    pub infrared: Tensor,
    pub labels: Vec<u32>,
    pub draws: StepDraws,
}

pub struct Trainer<'a> {
    pub model: Model,
    adam: Adam,
    rng: ChaCha8Rng,
    schedule: StepSchedule,
    lr: LrSchedule,
    weights: LossWeights,
    /// Next epoch to run.
    epoch: usize,
    dataset: &'a Dataset,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        let model = Model::new(config, dataset.num_identities())?;
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        rng.set_stream(DATA_STREAM);
        Self::assemble(model, Adam::new(&config.optim), rng, 0, dataset)
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: &Path, dataset: &'a Dataset) -> Result<Self> {
        let (model, ckpt) = load_model(path)?;
        if ckpt.meta.num_identities != dataset.num_identities() {
            return Err(Error::Checkpoint(format!(
                "checkpoint trained on {} identities, dataset has {}",
                ckpt.meta.num_identities,
                dataset.num_identities()
            )));
        }
        if model.config.hash() != ckpt.meta.config_hash {
            return Err(Error::Checkpoint("config hash does not match embedded config".into()));
        }
        let mut adam = Adam::new(&model.config.optim);
        adam.restore(ckpt.moments);
        let rng = ckpt.meta.rng.restore();
        Self::assemble(model, adam, rng, ckpt.meta.epoch, dataset)
    }

    fn assemble(model: Model, adam: Adam, rng: ChaCha8Rng, epoch: usize, dataset: &'a Dataset) -> Result<Self> {
        let cfg = &model.config;
        if (dataset.height, dataset.width) != (cfg.image.height, cfg.image.width) {
            return Err(Error::Shape(format!(
                "dataset images are {}x{}, config expects {}x{}",
                dataset.height, dataset.width, cfg.image.height, cfg.image.width
            )));
        }
        let starts = cfg.schedule.step_starts.clone().unwrap_or_default();
        let schedule = StepSchedule::from_starts(starts, cfg.num_steps, cfg.epochs)?;
        let lr = LrSchedule::from_config(&cfg.optim)?;
        let weights = LossWeights::from(&cfg.loss);
        Ok(Self {
            model,
            adam,
            rng,
            schedule,
            lr,
            weights,
            epoch,
            dataset,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.model.config
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn current_step(&self) -> usize {
        self.schedule.step_for_epoch(self.epoch)
    }

    pub fn batches_per_epoch(&self) -> usize {
        let cfg = &self.model.config;
        cfg.batches_per_epoch.unwrap_or_else(|| {
            let per_batch = cfg.batch.identities * cfg.batch.per_identity;
            (self.dataset.modality_indices(Modality::Visible).len() / per_batch).max(1)
        })
    }

    /// Samples the next batch and its step draws from the generator.
    pub fn next_batch(&mut self) -> Result<PreparedBatch> {
        let cfg = self.model.config.clone();
        let batch = sample_batch(self.dataset, cfg.batch.identities, cfg.batch.per_identity, &mut self.rng)?;
        let visible = batch_tensor(self.dataset, &batch.visible, &cfg.augment, &mut self.rng, &self.model)?;
        let infrared = batch_tensor(self.dataset, &batch.infrared, &cfg.augment, &mut self.rng, &self.model)?;
        let draws = StepDraws::sample(&mut self.rng, batch.len(), cfg.num_prototypes, &self.model.part_bank);
        Ok(PreparedBatch {
            visible,
            infrared,
            labels: batch.identities,
            draws,
        })
    }

    /// One optimizer step on a fresh batch.
    pub fn train_step(&mut self, batch_index: usize) -> Result<LossValues> {
        let t = self.current_step();
        let lr = self.lr.lr(self.epoch);
        let b = self.next_batch()?;
        let terms = self.model.objective(&b.visible, &b.infrared, &b.labels, t, &b.draws)?;
        let values = terms.values(&self.weights)?;
        if !values.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                batch: batch_index,
                terms: values.to_string(),
            });
        }
        let total = total_loss(&terms, &self.weights)?;
        let grads = total.backward()?;
        self.adam.step(&self.model.params, &grads, lr)?;
        Ok(values)
    }

    /// Runs one epoch, passing every step's values to `sink`.
    pub fn run_epoch(&mut self, sink: &mut dyn FnMut(usize, usize, &LossValues) -> Result<()>) -> Result<LossValues> {
        if self.epoch >= self.model.config.epochs {
            return Err(Error::Invalid(format!("all {} epochs already run", self.model.config.epochs)));
        }
        let n = self.batches_per_epoch();
        let t = self.current_step();
        let mut mean = LossValues::default();
        for i in 0..n {
            let v = self.train_step(i)?;
            sink(self.epoch, t, &v)?;
            mean.ce += v.ce / n as f64;
            mean.cc += v.cc / n as f64;
            mean.lc += v.lc / n as f64;
            mean.hc += v.hc / n as f64;
            mean.c += v.c / n as f64;
            mean.vc += v.vc / n as f64;
            mean.p += v.p / n as f64;
            mean.eq += v.eq / n as f64;
            mean.total += v.total / n as f64;
        }
        self.epoch += 1;
        Ok(mean)
    }

    pub fn meta(&self) -> CheckpointMeta {
        let cfg = &self.model.config;
        CheckpointMeta {
            version: VERSION,
            epoch: self.epoch,
            step_t: self.schedule.step_for_epoch(self.epoch.saturating_sub(1)),
            config_hash: cfg.hash(),
            config: cfg.to_toml_string(),
            num_identities: self.model.num_identities,
            rng: RngState::capture(&self.rng, cfg.seed),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, &self.adam, &self.meta())
    }

    /// Center distance between unit-normalized visible and infrared
    /// embeddings of a fixed subset of the training set.
    pub fn modality_gap(&self) -> Result<f64> {
        let cfg = &self.model.config.mmd;
        let ids = cfg.identities.min(self.dataset.num_identities());
        let pick = |m: Modality| -> Vec<usize> {
            (0..ids as u32)
                .flat_map(|id| {
                    self.dataset
                        .indices(id, m)
                        .iter()
                        .take(cfg.images_per_identity)
                        .copied()
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        let fv = embed_subset(&self.model, self.dataset, &pick(Modality::Visible))?;
        let fi = embed_subset(&self.model, self.dataset, &pick(Modality::Infrared))?;
        modality_gap(&fv, &fi)
    }
}

/// Files written by a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    /// Mean loss values of the last epoch.
    pub last_epoch: LossValues,
    pub epochs_run: usize,
}

fn open_csv(path: &Path, header: &str, fresh: bool) -> Result<File> {
    if fresh || !path.exists() {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
        Ok(f)
    } else {
        OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))
    }
}

/// Trains from scratch, writing artifacts under `out_dir`.
pub fn train(config: &TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainOutcome> {
    let trainer = Trainer::new(config, dataset)?;
    run(trainer, out_dir, true)
}

/// Continues a run from a checkpoint, appending to its metrics files.
pub fn resume(checkpoint: &Path, dataset: &Dataset, out_dir: &Path) -> Result<TrainOutcome> {
    let trainer = Trainer::resume(checkpoint, dataset)?;
    run(trainer, out_dir, false)
}

fn run(mut trainer: Trainer<'_>, out_dir: &Path, fresh: bool) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg = trainer.config().clone();
    let resolved = out_dir.join(RESOLVED_CONFIG_FILE);
    fs::write(&resolved, cfg.to_toml_string()).map_err(|e| Error::io(&resolved, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = open_csv(&metrics_path, METRICS_HEADER, fresh)?;
    let mmd_path = out_dir.join(MMD_FILE);
    let mut mmd = open_csv(&mmd_path, "epoch,mmd", fresh)?;
    log::info!(
        "training {} epochs from epoch {} (K={}, T={}, mode={}, config {})",
        cfg.epochs,
        trainer.epoch(),
        cfg.num_prototypes,
        cfg.num_steps,
        cfg.directionality_mode().as_str(),
        &cfg.hash()[..12]
    );
    let mut last = LossValues::default();
    let mut epochs_run = 0;
    while trainer.epoch() < cfg.epochs {
        let epoch = trainer.epoch();
        let mut sink = |e: usize, t: usize, v: &LossValues| -> Result<()> {
            writeln!(metrics, "{e},{t},{}", v.csv_fields()).map_err(|err| Error::io(&metrics_path, err))
        };
        last = match trainer.run_epoch(&mut sink) {
            Ok(v) => v,
            Err(err @ Error::Diverged { .. }) => {
                let dump = out_dir.join(DIVERGENCE_FILE);
                let _ = fs::write(&dump, format!("{err}\n"));
                return Err(err);
            }
            Err(err) => return Err(err),
        };
        epochs_run += 1;
        log::info!("epoch {epoch} t={} lr={:.2e} {last}", trainer.current_step().min(cfg.num_steps), trainer.lr.lr(epoch));
        if cfg.mmd.every > 0 && (epoch + 1) % cfg.mmd.every == 0 {
            let gap = trainer.modality_gap()?;
            writeln!(mmd, "{epoch},{gap}").map_err(|e| Error::io(&mmd_path, e))?;
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
            trainer.save(&out_dir.join(checkpoint_name(epoch + 1)))?;
        }
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.save(&final_checkpoint)?;
    Ok(TrainOutcome {
        out_dir: out_dir.to_path_buf(),
        final_checkpoint,
        last_epoch: last,
        epochs_run,
    })
}
