//! Versioned safetensors checkpoints: parameters, optimizer moments, and a
//! metadata block with progress, config and generator state.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use safetensors::tensor::TensorView;
use safetensors::SafeTensors;

use super::model::Model;
use super::optim::{Adam, Moments};
use crate::config::TrainConfig;
use crate::error::{Error, Result};

pub const FORMAT: &str = "bmdg-checkpoint";
pub const VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param.";
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

/// Position of a ChaCha8 generator seeded with `seed_from_u64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng, seed: u64) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub version: u32,
    /// Completed epochs.
    pub epoch: usize,
    /// Step index of the last completed epoch.
    pub step_t: usize,
    pub config_hash: String,
    /// Resolved configuration as TOML.
    pub config: String,
    pub num_identities: usize,
    pub rng: RngState,
}

impl CheckpointMeta {
    pub fn train_config(&self) -> Result<TrainConfig> {
        TrainConfig::from_toml_str(&self.config).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))
    }

    fn to_map(&self, adam_steps: &BTreeMap<String, u64>) -> HashMap<String, String> {
        let mut m = HashMap::new();
        m.insert("format".into(), FORMAT.into());
        m.insert("version".into(), self.version.to_string());
        m.insert("epoch".into(), self.epoch.to_string());
        m.insert("step_t".into(), self.step_t.to_string());
        m.insert("config_hash".into(), self.config_hash.clone());
        m.insert("config".into(), self.config.clone());
        m.insert("num_identities".into(), self.num_identities.to_string());
        m.insert("rng_seed".into(), self.rng.seed.to_string());
        m.insert("rng_stream".into(), self.rng.stream.to_string());
        m.insert("rng_word_pos".into(), self.rng.word_pos.to_string());
        m.insert(
            "adam_steps".into(),
            serde_json::to_string(adam_steps).expect("step map serializes"),
        );
        m
    }

    fn from_map(m: &HashMap<String, String>) -> Result<(Self, BTreeMap<String, u64>)> {
        let get = |k: &str| -> Result<&String> {
            m.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata key `{k}`")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Checkpoint(format!("metadata `{key}` is not a number: {v}")))
        }
        if get("format")? != FORMAT {
            return Err(Error::Checkpoint(format!("not a {FORMAT} file")));
        }
        let version: u32 = num("version", get("version")?)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let steps: BTreeMap<String, u64> = serde_json::from_str(get("adam_steps")?)
            .map_err(|e| Error::Checkpoint(format!("metadata `adam_steps`: {e}")))?;
        Ok((
            Self {
                version,
                epoch: num("epoch", get("epoch")?)?,
                step_t: num("step_t", get("step_t")?)?,
                config_hash: get("config_hash")?.clone(),
                config: get("config")?.clone(),
                num_identities: num("num_identities", get("num_identities")?)?,
                rng: RngState {
                    seed: num("rng_seed", get("rng_seed")?)?,
                    stream: num("rng_stream", get("rng_stream")?)?,
                    word_pos: num("rng_word_pos", get("rng_word_pos")?)?,
                },
            },
            steps,
        ))
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, adam: &Adam, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, var) in model.params.vars() {
        tensors.push((format!("{PARAM_PREFIX}{name}"), var.as_tensor().detach()));
    }
    let mut steps = BTreeMap::new();
    for (name, st) in adam.state() {
        tensors.push((format!("{M_PREFIX}{name}"), st.m.clone()));
        tensors.push((format!("{V_PREFIX}{name}"), st.v.clone()));
        steps.insert(name.clone(), st.steps);
    }
    let metadata = meta.to_map(&steps);
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(metadata), &tmp)
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn to_tensor(view: &TensorView<'_>, device: &Device) -> Result<Tensor> {
    let dtype = match view.dtype() {
        safetensors::Dtype::F32 => DType::F32,
        safetensors::Dtype::F64 => DType::F64,
        other => return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    };
    Ok(Tensor::from_raw_buffer(view.data(), dtype, view.shape(), device)?)
}

/// Everything stored in a checkpoint file.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub moments: BTreeMap<String, Moments>,
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let map = header
        .metadata()
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no metadata".into()))?;
    let (meta, steps) = CheckpointMeta::from_map(&map)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let device = Device::Cpu;
    let mut params = BTreeMap::new();
    let mut ms = BTreeMap::new();
    let mut vs = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = to_tensor(&view, &device)?;
        if let Some(n) = name.strip_prefix(PARAM_PREFIX) {
            params.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(M_PREFIX) {
            ms.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(V_PREFIX) {
            vs.insert(n.to_string(), t);
        }
    }
    let mut moments = BTreeMap::new();
    for (name, m) in ms {
        let v = vs
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("second moment of `{name}` missing")))?;
        let steps = *steps
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("step count of `{name}` missing")))?;
        moments.insert(name, Moments { m, v, steps });
    }
    Ok(Checkpoint { meta, params, moments })
}

/// Rebuilds the model stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
    let ckpt = read_checkpoint(path)?;
    let config = ckpt.meta.train_config()?;
    let dtype = ckpt
        .params
        .values()
        .next()
        .map(|t| t.dtype())
        .ok_or_else(|| Error::Checkpoint("checkpoint holds no parameters".into()))?;
    let model = Model::with_dtype(&config, ckpt.meta.num_identities, dtype, Device::Cpu)?;
    let expected = model.params.names();
    if expected.len() != ckpt.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            ckpt.params.len(),
            expected.len()
        )));
    }
    for (name, t) in &ckpt.params {
        model.params.assign(name, t)?;
    }
    Ok((model, ckpt))
}
