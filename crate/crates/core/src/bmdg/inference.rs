//! Retrieval evaluation and modality-gap measurement of a trained model.

use candle_core::{DType, Device, Tensor};

use super::model::{dataset_images, Model};
use crate::error::Result;
use crate::eval::{evaluate, mmd_gap, Direction, EmbeddingSet, Protocol, RetrievalResult};
use crate::losses::l2_normalize;
use crate::synthdata::{Dataset, Modality};

const CHUNK: usize = 64;

/// Unit-normalized embeddings of one modality with identity and camera labels.
pub struct ModalityEmbeddings {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
    pub cameras: Vec<u32>,
    pub indices: Vec<usize>,
}

pub fn embed_modality(model: &Model, dataset: &Dataset, modality: Modality) -> Result<ModalityEmbeddings> {
    let indices = dataset.modality_indices(modality);
    embed_subset(model, dataset, &indices)
}

/// Embeddings of the given images, all from one modality.
pub fn embed_subset(model: &Model, dataset: &Dataset, indices: &[usize]) -> Result<ModalityEmbeddings> {
    let raw = model.embed_indices(dataset, indices, CHUNK)?;
    let n = raw.len();
    let d = raw.first().map(Vec::len).unwrap_or(0);
    let features = if n == 0 {
        Vec::new()
    } else {
        let t = Tensor::from_vec(raw.concat(), (n, d), &Device::Cpu)?;
        l2_normalize(&t)?.to_vec2::<f64>()?
    };
    Ok(ModalityEmbeddings {
        features,
        labels: indices.iter().map(|&i| dataset.entries[i].identity).collect(),
        cameras: indices.iter().map(|&i| dataset.entries[i].camera).collect(),
        indices: indices.to_vec(),
    })
}

/// Cross-modal retrieval with queries from one modality and the gallery
/// from the other.
pub fn evaluate_model(
    model: &Model,
    dataset: &Dataset,
    direction: Direction,
    protocol: Protocol,
    seed: u64,
) -> Result<RetrievalResult> {
    let v = embed_modality(model, dataset, Modality::Visible)?;
    let i = embed_modality(model, dataset, Modality::Infrared)?;
    evaluate_embeddings(&v, &i, direction, protocol, seed)
}

pub fn evaluate_embeddings(
    visible: &ModalityEmbeddings,
    infrared: &ModalityEmbeddings,
    direction: Direction,
    protocol: Protocol,
    seed: u64,
) -> Result<RetrievalResult> {
    fn set(m: &ModalityEmbeddings) -> EmbeddingSet<'_> {
        EmbeddingSet {
            features: &m.features,
            labels: &m.labels,
            cameras: &m.cameras,
        }
    }
    let (q, g) = match direction {
        Direction::VisibleToInfrared => (set(visible), set(infrared)),
        Direction::InfraredToVisible => (set(infrared), set(visible)),
    };
    evaluate(&q, &g, protocol, direction, seed)
}

/// Center distance between unit-normalized visible and infrared embeddings.
pub fn modality_gap(visible: &ModalityEmbeddings, infrared: &ModalityEmbeddings) -> Result<f64> {
    mmd_gap(&visible.features, &infrared.features)
}

/// Mask probabilities of single-modality images as `(H, W, rows)` where
/// each row holds `H*W*K` values, pixel-major.
pub fn mask_values(model: &Model, dataset: &Dataset, indices: &[usize]) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let mut out = Vec::with_capacity(indices.len());
    let (mut h, mut w) = (0, 0);
    for &i in indices {
        let x = dataset_images(dataset, &[i], model.dtype(), model.device())?;
        let m = model.masks(&x, dataset.entries[i].modality)?;
        h = m.height;
        w = m.width;
        out.push(m.m.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
    }
    Ok((h, w, out))
}
