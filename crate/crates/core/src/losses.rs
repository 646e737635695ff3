//! Training objectives.
//!
//! Every loss takes batched tensors and returns a differentiable scalar.
//! Shapes use `B` for the batch, `K` for prototypes, `HW` for mask pixels.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Linear;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Offset inside square roots; keeps norms differentiable at zero.
const NORM_EPS: f64 = 1e-12;

fn scalar(v: f64, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::new(v, like.device())?.to_dtype(like.dtype())?)
}

fn constant(values: Vec<f64>, shape: &[usize], like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, like.device())?.to_dtype(like.dtype())?)
}

/// Euclidean norm over the last dimension, exactly zero for a zero vector.
fn safe_norm(x: &Tensor) -> Result<Tensor> {
    let sq = x.sqr()?.sum(D::Minus1)?;
    Ok(((sq + NORM_EPS)?.sqrt()? - NORM_EPS.sqrt())?)
}

/// Rows scaled to unit length along the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + NORM_EPS)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Shared body of the two part-contrastive losses. For anchor `p_b^k` and
/// each positive `p_{b'}^k` with `pairs[b][b'] = 1`:
/// `-log(e^{s+/tau} / (e^{s+/tau} + sum_{q != k} e^{p_b^k . p_b^q / tau}))`,
/// averaged over all (anchor, positive) pairs. Zero when no pair exists.
fn part_contrastive(protos: &Tensor, pairs: &[f64], tau: f64) -> Result<Tensor> {
    let (b, k, _) = protos.dims3()?;
    if k < 2 {
        return Err(Error::NoNegatives(k));
    }
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let n_pairs: f64 = pairs.iter().sum();
    if n_pairs == 0.0 {
        return scalar(0.0, protos);
    }
    let p = l2_normalize(protos)?;
    let inv_tau = 1.0 / tau;

    // Anchor-local negatives: log sum_{q != k} exp(s_kq / tau).
    let local = p.matmul(&p.transpose(1, 2)?.contiguous()?)?; // (B, K, K)
    let mut off = vec![1.0; k * k];
    for i in 0..k {
        off[i * k + i] = 0.0;
    }
    let off = constant(off, &[1, k, k], protos)?;
    // Cosines are at most 1, so shifting by 1/tau bounds every exponent by 0.
    let shifted = ((local - 1.0)? * inv_tau)?.exp()?.broadcast_mul(&off)?;
    let neg_lse = (shifted.sum(2)?.log()? + inv_tau)?; // (B, K)

    // Same-index similarities across the batch.
    let per_index = p.transpose(0, 1)?.contiguous()?; // (K, B, d)
    let pos = (per_index.matmul(&per_index.transpose(1, 2)?.contiguous()?)? * inv_tau)?; // (K, B, B)
    let arg = neg_lse.transpose(0, 1)?.unsqueeze(2)?.broadcast_sub(&pos)?;
    let terms = softplus(&arg)?;
    let w = constant(pairs.to_vec(), &[1, b, b], protos)?;
    let total = terms.broadcast_mul(&w)?.sum_all()?;
    Ok((total / (n_pairs * k as f64))?)
}

/// Low-level, inter-person loss: positives are same-index prototypes of every
/// other image in the batch. `low` is `(B, K, d')`.
pub fn loss_lc(low: &Tensor, tau: f64) -> Result<Tensor> {
    let b = low.dim(0)?;
    if b < 2 {
        return Err(Error::Invalid("inter-person contrast needs at least two samples".into()));
    }
    let pairs: Vec<f64> = (0..b * b).map(|i| if i / b != i % b { 1.0 } else { 0.0 }).collect();
    part_contrastive(low, &pairs, tau)
}

/// High-level, intra-person loss: positives are same-index prototypes of
/// other images with the same identity.
pub fn loss_hc(high: &Tensor, identities: &[u32], tau: f64) -> Result<Tensor> {
    let b = high.dim(0)?;
    if identities.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} samples", identities.len())));
    }
    let pairs: Vec<f64> = (0..b * b)
        .map(|i| {
            let (x, y) = (i / b, i % b);
            if x != y && identities[x] == identities[y] {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    part_contrastive(high, &pairs, tau)
}

/// Mask-weighted distance of pixel features to their prototype:
/// `sum_k sum_u M^k_u ||p^k - F_u||`, averaged over the batch.
pub fn loss_compact(features: &Tensor, masks: &Tensor, prototypes: &Tensor) -> Result<Tensor> {
    let (b, hw, d) = features.dims3()?;
    let (_, k, pd) = prototypes.dims3()?;
    if masks.dims() != [b, hw, k] || pd != d {
        return Err(Error::Shape(format!(
            "features {:?}, masks {:?}, prototypes {:?}",
            features.dims(),
            masks.dims(),
            prototypes.dims()
        )));
    }
    let diff = prototypes.unsqueeze(2)?.broadcast_sub(&features.unsqueeze(1)?)?; // (B, K, HW, d)
    let dist = safe_norm(&diff)?; // (B, K, HW)
    let weighted = dist.mul(&masks.transpose(1, 2)?)?;
    Ok((weighted.sum_all()? / b as f64)?)
}

/// Pairwise mask overlap `sum_{k<q} sum_u M^k_u M^q_u`, averaged over the
/// batch. Zero exactly when supports are disjoint.
pub fn loss_diverse(masks: &Tensor) -> Result<Tensor> {
    let (b, _, k) = masks.dims3()?;
    let gram = masks.transpose(1, 2)?.contiguous()?.matmul(masks)?; // (B, K, K)
    let mut upper = vec![0.0; k * k];
    for i in 0..k {
        for j in i + 1..k {
            upper[i * k + j] = 1.0;
        }
    }
    let upper = constant(upper, &[1, k, k], masks)?;
    Ok((gram.broadcast_mul(&upper)?.sum_all()? / b as f64)?)
}

/// L1 distance between masks and the inverse-transformed masks of the
/// transformed image, summed over prototypes and averaged over the batch.
/// `valid` optionally weights pixels (length `HW`).
pub fn loss_equivariance(original: &Tensor, restored: &Tensor, valid: Option<&[f64]>) -> Result<Tensor> {
    if original.dims() != restored.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", original.dims(), restored.dims())));
    }
    let (b, hw, _) = original.dims3()?;
    let mut diff = (original - restored)?.abs()?;
    if let Some(v) = valid {
        if v.len() != hw {
            return Err(Error::Shape(format!("{} validity weights for {hw} pixels", v.len())));
        }
        diff = diff.broadcast_mul(&constant(v.to_vec(), &[1, hw, 1], original)?)?;
    }
    Ok((diff.sum_all()? / b as f64)?)
}

/// One-hot rows `(N, C)`.
fn one_hot(labels: &[u32], classes: usize, like: &Tensor) -> Result<Tensor> {
    let mut v = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= classes {
            return Err(Error::Invalid(format!("label {y} outside {classes} classes")));
        }
        v[i * classes + y as usize] = 1.0;
    }
    constant(v, &[labels.len(), classes], like)
}

pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Mean cross-entropy of `(N, C)` logits against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n || n == 0 {
        return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    let picked = log_softmax(logits)?.mul(&one_hot(labels, c, logits)?)?;
    Ok((picked.sum_all()?.neg()? / n as f64)?)
}

/// K independent linear identity classifiers, one per prototype index.
pub struct PartClassifierBank {
    classifiers: Vec<Linear>,
    pub dropout: f64,
}

impl PartClassifierBank {
    pub fn new(
        num_prototypes: usize,
        d: usize,
        num_classes: usize,
        dropout: f64,
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let classifiers = (0..num_prototypes)
            .map(|k| params.linear(&format!("part_cls.{k}"), d, num_classes, true, false, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { classifiers, dropout })
    }

    pub fn from_layers(classifiers: Vec<Linear>, dropout: f64) -> Self {
        Self { classifiers, dropout }
    }

    pub fn len(&self) -> usize {
        self.classifiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classifiers.is_empty()
    }

    /// Logits `(B, C)` of classifier `k` on prototype column `k`.
    pub fn logits(&self, prototypes: &Tensor, k: usize) -> Result<Tensor> {
        let p = prototypes.narrow(1, k, 1)?.squeeze(1)?;
        Ok(self.classifiers[k].forward(&p)?)
    }

    /// Training-time classifier dropout: each classifier is kept with
    /// probability `1 - dropout`; at least one always survives.
    pub fn sample_keep(&self, rng: &mut impl Rng) -> Vec<bool> {
        let mut keep: Vec<bool> = (0..self.len()).map(|_| rng.random::<f64>() >= self.dropout).collect();
        if !keep.iter().any(|&k| k) {
            let i = rng.random_range(0..keep.len());
            keep[i] = true;
        }
        keep
    }
}

/// `(1/K) sum_k CE(W^k(p^k), y)`; with a keep mask the mean runs over the
/// kept classifiers only.
pub fn loss_part_id(
    prototypes: &Tensor,
    labels: &[u32],
    bank: &PartClassifierBank,
    keep: Option<&[bool]>,
) -> Result<Tensor> {
    let (_, k, _) = prototypes.dims3()?;
    if k != bank.len() {
        return Err(Error::Shape(format!("{k} prototypes for {} classifiers", bank.len())));
    }
    let mut total: Option<Tensor> = None;
    let mut used = 0usize;
    for idx in 0..k {
        if keep.is_some_and(|m| !m[idx]) {
            continue;
        }
        let ce = cross_entropy(&bank.logits(prototypes, idx)?, labels)?;
        total = Some(match total {
            None => ce,
            Some(t) => (t + ce)?,
        });
        used += 1;
    }
    match total {
        Some(t) => Ok((t / used as f64)?),
        None => Err(Error::Invalid("every part classifier dropped".into())),
    }
}

/// Center-cluster loss over the union of two aligned embedding sets.
///
/// `mean_j ||x_j - c_{y_j}||^2 + sum_{y != y'} max(0, margin - ||c_y - c_y'||)`,
/// with per-identity centers `c_y` taken over the union.
pub fn loss_center_cluster(x: &Tensor, x_prime: &Tensor, labels: &[u32], margin: f64) -> Result<Tensor> {
    let (n, _) = x.dims2()?;
    if n == 0 || x.dims() != x_prime.dims() || labels.len() != n {
        return Err(Error::Shape(format!(
            "center loss inputs {:?}, {:?} with {} labels",
            x.dims(),
            x_prime.dims(),
            labels.len()
        )));
    }
    let union = Tensor::cat(&[x, x_prime], 0)?;
    let mut ids: Vec<u32> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let y = ids.len();
    let slot = |l: u32| ids.binary_search(&l).unwrap();
    // Assignment (2n, Y) and per-identity averaging (Y, 2n).
    let mut assign = vec![0.0; 2 * n * y];
    let mut counts = vec![0.0; y];
    for (j, &l) in labels.iter().chain(labels.iter()).enumerate() {
        assign[j * y + slot(l)] = 1.0;
        counts[slot(l)] += 1.0;
    }
    let mut avg = vec![0.0; y * 2 * n];
    for j in 0..2 * n {
        for c in 0..y {
            if assign[j * y + c] == 1.0 {
                avg[c * 2 * n + j] = 1.0 / counts[c];
            }
        }
    }
    let assign = constant(assign, &[2 * n, y], x)?;
    let avg = constant(avg, &[y, 2 * n], x)?;
    let centers = avg.matmul(&union)?; // (Y, D)
    let own = assign.matmul(&centers)?; // (2n, D)
    let compact = ((union - own)?.sqr()?.sum_all()? / (2 * n) as f64)?;
    if y < 2 {
        return Ok(compact);
    }
    let diff = centers.unsqueeze(1)?.broadcast_sub(&centers.unsqueeze(0)?)?; // (Y, Y, D)
    let dist = (diff.sqr()?.sum(D::Minus1)? + NORM_EPS)?.sqrt()?;
    let mut off = vec![1.0; y * y];
    for i in 0..y {
        off[i * y + i] = 0.0;
    }
    let off = constant(off, &[y, y], x)?;
    let hinge = (dist.neg()? + margin)?.relu()?.mul(&off)?;
    Ok((compact + hinge.sum_all()?)?)
}

/// Re-identification terms of one training step.
pub struct ReidTerms {
    /// Sum of identity cross-entropies over the four embedding sets.
    pub ce: Tensor,
    /// Sum of the two center-cluster pairings.
    pub cc: Tensor,
}

/// `L_bce = CE(f_v) + CE(f_v^t) + CE(f_i) + CE(f_i^t)` through the shared
/// identity classifier and
/// `L_bcc = L_cc(f_v, f_v^t) + L_cc(f_i, f_i^t)` on unit-normalized embeddings.
pub fn loss_reid(
    emb_v: &Tensor,
    emb_i: &Tensor,
    mid_v: &Tensor,
    mid_i: &Tensor,
    labels: &[u32],
    classifier: &Linear,
    margin: f64,
) -> Result<ReidTerms> {
    let mut ce = cross_entropy(&classifier.forward(emb_v)?, labels)?;
    for f in [mid_v, emb_i, mid_i] {
        ce = (ce + cross_entropy(&classifier.forward(f)?, labels)?)?;
    }
    let (nv, ni) = (l2_normalize(emb_v)?, l2_normalize(emb_i)?);
    let cc_v = loss_center_cluster(&nv, &l2_normalize(mid_v)?, labels, margin)?;
    let cc_i = loss_center_cluster(&ni, &l2_normalize(mid_i)?, labels, margin)?;
    Ok(ReidTerms {
        ce,
        cc: (cc_v + cc_i)?,
    })
}

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_v: f64,
    pub lambda_c: f64,
    pub lambda_i: f64,
    pub lambda_e: f64,
    pub tau: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_f, self.lambda_v, self.lambda_c, self.lambda_i, self.lambda_e];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invalid("loss weights must be finite and nonnegative".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Invalid("temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            lambda_f: self.lambda_f * factor,
            lambda_v: self.lambda_v * factor,
            lambda_c: self.lambda_c * factor,
            lambda_i: self.lambda_i * factor,
            lambda_e: self.lambda_e * factor,
            tau: self.tau,
        }
    }
}

impl From<&LossConfig> for LossWeights {
    fn from(c: &LossConfig) -> Self {
        Self {
            lambda_f: c.lambda_f,
            lambda_v: c.lambda_v,
            lambda_c: c.lambda_c,
            lambda_i: c.lambda_i,
            lambda_e: c.lambda_e,
            tau: c.tau,
        }
    }
}

/// Individual loss terms of one step.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub ce: Tensor,
    pub cc: Tensor,
    pub lc: Tensor,
    pub hc: Tensor,
    pub c: Tensor,
    pub vc: Tensor,
    pub p: Tensor,
    pub eq: Tensor,
}

/// Scalar values of [`LossTerms`] plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub ce: f64,
    pub cc: f64,
    pub lc: f64,
    pub hc: f64,
    pub c: f64,
    pub vc: f64,
    pub p: f64,
    pub eq: f64,
    pub total: f64,
}

impl LossValues {
    pub const CSV_HEADER: &'static str = "ce,cc,lc,hc,c,vc,p,eq,total";

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.ce, self.cc, self.lc, self.hc, self.c, self.vc, self.p, self.eq, self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.cc, self.lc, self.hc, self.c, self.vc, self.p, self.eq, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossValues {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ce={:.6} cc={:.6} lc={:.6} hc={:.6} c={:.6} vc={:.6} p={:.6} eq={:.6} total={:.6}",
            self.ce, self.cc, self.lc, self.hc, self.c, self.vc, self.p, self.eq, self.total
        )
    }
}

impl LossTerms {
    /// `L_re` = identity cross-entropy plus center clustering.
    pub fn reid(&self) -> Result<Tensor> {
        Ok((&self.ce + &self.cc)?)
    }

    pub fn values(&self, w: &LossWeights) -> Result<LossValues> {
        let get = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossValues {
            ce: get(&self.ce)?,
            cc: get(&self.cc)?,
            lc: get(&self.lc)?,
            hc: get(&self.hc)?,
            c: get(&self.c)?,
            vc: get(&self.vc)?,
            p: get(&self.p)?,
            eq: get(&self.eq)?,
            total: get(&total_loss(self, w)?)?,
        })
    }
}

/// `L = L_re + lambda_f (L_lc + L_hc) + lambda_v L_vc + lambda_c L_c
///     + lambda_i L_p + lambda_e L_eq`.
pub fn total_loss(t: &LossTerms, w: &LossWeights) -> Result<Tensor> {
    let mut total = t.reid()?;
    total = (total + ((&t.lc + &t.hc)? * w.lambda_f)?)?;
    total = (total + (&t.vc * w.lambda_v)?)?;
    total = (total + (&t.c * w.lambda_c)?)?;
    total = (total + (&t.p * w.lambda_i)?)?;
    total = (total + (&t.eq * w.lambda_e)?)?;
    Ok(total)
}

/// A zero scalar in the given dtype.
pub fn zero(dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, device)?)
}
