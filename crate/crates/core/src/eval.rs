//! Cross-modal retrieval metrics, modality-gap measures and 2-D projection.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Ranks at which CMC accuracy is reported.
pub const CMC_RANKS: [usize; 4] = [1, 5, 10, 20];

/// Gallery draws averaged by the single-shot protocol.
pub const SINGLE_SHOT_REPEATS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// One gallery image per identity and camera, averaged over random draws.
    SingleShot,
    /// Every gallery image.
    MultiShot,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::SingleShot => "single",
            Protocol::MultiShot => "multi",
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Protocol::SingleShot),
            "multi" => Ok(Protocol::MultiShot),
            _ => Err(Error::Invalid(format!("unknown protocol `{s}` (expected single or multi)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Visible queries against an infrared gallery.
    VisibleToInfrared,
    InfraredToVisible,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::VisibleToInfrared => "v2i",
            Direction::InfraredToVisible => "i2v",
        }
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v2i" => Ok(Direction::VisibleToInfrared),
            "i2v" => Ok(Direction::InfraredToVisible),
            _ => Err(Error::Invalid(format!("unknown direction `{s}` (expected v2i or i2v)"))),
        }
    }
}

/// CMC and mAP in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// Accuracy at each of [`CMC_RANKS`].
    pub cmc: [f64; 4],
    pub map: f64,
    pub protocol: Protocol,
    pub direction: Direction,
    pub queries: usize,
    /// Queries whose identity has no gallery image.
    pub excluded: usize,
}

impl RetrievalResult {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }

    pub const CSV_HEADER: &'static str = "direction,protocol,r1,r5,r10,r20,map,queries,excluded";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.direction.as_str(),
            self.protocol.as_str(),
            self.cmc[0],
            self.cmc[1],
            self.cmc[2],
            self.cmc[3],
            self.map,
            self.queries,
            self.excluded
        )
    }
}

impl fmt::Display for RetrievalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}-shot: R1 {:.2}  R5 {:.2}  R10 {:.2}  R20 {:.2}  mAP {:.2}  ({} queries, {} excluded)",
            self.direction.as_str(),
            self.protocol.as_str(),
            self.cmc[0],
            self.cmc[1],
            self.cmc[2],
            self.cmc[3],
            self.map,
            self.queries,
            self.excluded
        )
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn match_score(query: &[f64], gallery: &[f64]) -> f64 {
    let dot: f64 = query.iter().zip(gallery).map(|(a, b)| a * b).sum();
    let nq = query.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ng = gallery.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nq == 0.0 || ng == 0.0 {
        0.0
    } else {
        (dot / (nq * ng)).clamp(-1.0, 1.0)
    }
}

pub fn similarity_matrix(query: &[Vec<f64>], gallery: &[Vec<f64>]) -> Vec<Vec<f64>> {
    query
        .iter()
        .map(|q| gallery.iter().map(|g| match_score(q, g)).collect())
        .collect()
}

/// Per-query outcome: 0-based rank of the first correct match and average
/// precision, or `None` when the gallery holds no match.
fn score_query(sims: &[f64], query_label: u32, gallery_labels: &[u32]) -> Option<(usize, f64)> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first = None;
    for (pos, &g) in order.iter().enumerate() {
        if gallery_labels[g] == query_label {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            first.get_or_insert(pos);
        }
    }
    first.map(|r| (r, precision_sum / hits as f64))
}

/// Multi-shot metrics over a precomputed similarity matrix.
pub fn evaluate_similarities(
    sims: &[Vec<f64>],
    query_labels: &[u32],
    gallery_labels: &[u32],
    direction: Direction,
) -> Result<RetrievalResult> {
    if sims.len() != query_labels.len() || sims.iter().any(|r| r.len() != gallery_labels.len()) {
        return Err(Error::Shape("similarity matrix does not match labels".into()));
    }
    let mut hits = [0usize; 4];
    let mut ap_sum = 0.0;
    let mut used = 0usize;
    for (row, &y) in sims.iter().zip(query_labels) {
        let Some((rank, ap)) = score_query(row, y, gallery_labels) else {
            continue;
        };
        used += 1;
        ap_sum += ap;
        for (h, &k) in hits.iter_mut().zip(CMC_RANKS.iter()) {
            if rank < k {
                *h += 1;
            }
        }
    }
    let excluded = query_labels.len() - used;
    if excluded > 0 {
        log::warn!("{excluded} queries have no matching gallery identity and were excluded");
    }
    let pct = |x: f64| if used == 0 { 0.0 } else { 100.0 * x / used as f64 };
    let cmc = hits.map(|h| pct(h as f64));
    debug_assert!(cmc.windows(2).all(|w| w[0] <= w[1]));
    Ok(RetrievalResult {
        cmc,
        map: pct(ap_sum),
        protocol: Protocol::MultiShot,
        direction,
        queries: used,
        excluded,
    })
}

/// Retrieval embeddings with identity and camera labels.
pub struct EmbeddingSet<'a> {
    pub features: &'a [Vec<f64>],
    pub labels: &'a [u32],
    pub cameras: &'a [u32],
}

/// CMC/mAP of queries against a gallery. Single shot keeps one random
/// gallery image per (identity, camera) and averages
/// [`SINGLE_SHOT_REPEATS`] seeded draws.
pub fn evaluate(
    query: &EmbeddingSet<'_>,
    gallery: &EmbeddingSet<'_>,
    protocol: Protocol,
    direction: Direction,
    seed: u64,
) -> Result<RetrievalResult> {
    if query.features.len() != query.labels.len() || gallery.features.len() != gallery.labels.len() {
        return Err(Error::Shape("embeddings and labels differ in length".into()));
    }
    let sims = similarity_matrix(query.features, gallery.features);
    match protocol {
        Protocol::MultiShot => evaluate_similarities(&sims, query.labels, gallery.labels, direction),
        Protocol::SingleShot => {
            if gallery.cameras.len() != gallery.labels.len() {
                return Err(Error::Shape("gallery cameras and labels differ in length".into()));
            }
            let mut groups: std::collections::BTreeMap<(u32, u32), Vec<usize>> = Default::default();
            for (i, (&y, &c)) in gallery.labels.iter().zip(gallery.cameras).enumerate() {
                groups.entry((y, c)).or_default().push(i);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut acc = RetrievalResult {
                cmc: [0.0; 4],
                map: 0.0,
                protocol,
                direction,
                queries: 0,
                excluded: 0,
            };
            for _ in 0..SINGLE_SHOT_REPEATS {
                let chosen: Vec<usize> = groups
                    .values()
                    .map(|g| g[sample_indices(&mut rng, g.len(), 1).index(0)])
                    .collect();
                let sub: Vec<Vec<f64>> = sims.iter().map(|r| chosen.iter().map(|&j| r[j]).collect()).collect();
                let labels: Vec<u32> = chosen.iter().map(|&j| gallery.labels[j]).collect();
                let r = evaluate_similarities(&sub, query.labels, &labels, direction)?;
                for k in 0..4 {
                    acc.cmc[k] += r.cmc[k] / SINGLE_SHOT_REPEATS as f64;
                }
                acc.map += r.map / SINGLE_SHOT_REPEATS as f64;
                acc.queries = r.queries;
                acc.excluded = r.excluded;
            }
            Ok(acc)
        }
    }
}

fn mean_vector(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows.first().ok_or_else(|| Error::Invalid("empty feature set".into()))?;
    let mut m = vec![0.0; first.len()];
    for r in rows {
        if r.len() != m.len() {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    for a in &mut m {
        *a /= rows.len() as f64;
    }
    Ok(m)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Euclidean distance between the modality centers.
pub fn mmd_gap(visible: &[Vec<f64>], infrared: &[Vec<f64>]) -> Result<f64> {
    let (cv, ci) = (mean_vector(visible)?, mean_vector(infrared)?);
    if cv.len() != ci.len() {
        return Err(Error::Shape("modalities differ in feature width".into()));
    }
    Ok(euclidean(&cv, &ci))
}

/// Center distance averaged over identities present in both modalities.
pub fn mmd_gap_per_identity(
    visible: &[Vec<f64>],
    visible_labels: &[u32],
    infrared: &[Vec<f64>],
    infrared_labels: &[u32],
) -> Result<f64> {
    let mut ids: Vec<u32> = visible_labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut total = 0.0;
    let mut n = 0usize;
    for id in ids {
        let v: Vec<Vec<f64>> = visible.iter().zip(visible_labels).filter(|(_, &l)| l == id).map(|(f, _)| f.clone()).collect();
        let i: Vec<Vec<f64>> = infrared.iter().zip(infrared_labels).filter(|(_, &l)| l == id).map(|(f, _)| f.clone()).collect();
        if i.is_empty() {
            continue;
        }
        total += mmd_gap(&v, &i)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Invalid("no identity present in both modalities".into()));
    }
    Ok(total / n as f64)
}

/// Biased squared kernel MMD with an RBF kernel of bandwidth `sigma`.
pub fn mmd_rbf(visible: &[Vec<f64>], infrared: &[Vec<f64>], sigma: f64) -> Result<f64> {
    if visible.is_empty() || infrared.is_empty() {
        return Err(Error::Invalid("empty feature set".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Invalid("kernel bandwidth must be positive".into()));
    }
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let mean_k = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        let mut s = 0.0;
        for a in x {
            for b in y {
                s += k(a, b);
            }
        }
        s / (x.len() * y.len()) as f64
    };
    Ok((mean_k(visible, visible) + mean_k(infrared, infrared) - 2.0 * mean_k(visible, infrared)).max(0.0))
}

/// Principal-component projection.
#[derive(Debug, Clone)]
pub struct Projection {
    /// `N x 2` coordinates.
    pub coords: Vec<[f64; 2]>,
    /// Covariance eigenvalues, largest first.
    pub eigenvalues: Vec<f64>,
    /// The two leading unit components.
    pub components: [Vec<f64>; 2],
    pub mean: Vec<f64>,
}

/// PCA onto the two leading components of the sample covariance. Each
/// component is signed so its first nonzero loading is positive.
pub fn project_2d(embeddings: &[Vec<f64>]) -> Result<Projection> {
    let n = embeddings.len();
    let mean = mean_vector(embeddings)?;
    let d = mean.len();
    if d < 2 {
        return Err(Error::Invalid("projection needs at least two dimensions".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| embeddings[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let component = |idx: usize| -> Vec<f64> {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        if let Some(first) = v.iter().find(|c| c.abs() > 1e-12) {
            if *first < 0.0 {
                v.iter_mut().for_each(|c| *c = -*c);
            }
        }
        v
    };
    let components = [component(order[0]), component(order[1])];
    let coords = (0..n)
        .map(|i| {
            let row = x.row(i);
            let dot = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [dot(&components[0]), dot(&components[1])]
        })
        .collect();
    Ok(Projection {
        coords,
        eigenvalues: order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect(),
        components,
        mean,
    })
}
