//! Exact information-theoretic checks on small discrete distributions.
//!
//! All quantities are in nats, with `0 log 0 = 0`.

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_ALPHABET: usize = 6;
pub const NORMALIZATION_TOL: f64 = 1e-12;
pub const FACTORIZATION_TOL: f64 = 1e-10;
pub const LOWER_BOUND_TOL: f64 = 1e-9;
pub const CE_BOUND_TOL: f64 = 1e-12;
pub const KL_IDENTITY_TOL: f64 = 1e-10;

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Shannon entropy of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&x| plogp(x)).sum::<f64>()
}

/// Dense joint table over `(P^1, ..., P^K, Y)`, row-major with `Y` last.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    dims: Vec<usize>,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(dims: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Invalid("joint needs at least one part and a target".into()));
        }
        if dims.iter().any(|&d| d == 0 || d > MAX_ALPHABET) {
            return Err(Error::Invalid(format!("alphabet sizes must lie in 1..={MAX_ALPHABET}")));
        }
        if probs.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!("{} probabilities for dims {dims:?}", probs.len())));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Invalid("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Invalid(format!("probabilities sum to {total}")));
        }
        Ok(Self { dims, probs })
    }

    pub fn num_parts(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn target_axis(&self) -> usize {
        self.dims.len() - 1
    }

    fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dims.len()];
        for a in (0..self.dims.len()).rev() {
            idx[a] = flat % self.dims[a];
            flat /= self.dims[a];
        }
        idx
    }

    /// Marginal over `axes` (kept in the given order), flattened row-major.
    pub fn marginal(&self, axes: &[usize]) -> Vec<f64> {
        let size: usize = axes.iter().map(|&a| self.dims[a]).product();
        let mut out = vec![0.0; size];
        for (flat, &p) in self.probs.iter().enumerate() {
            let idx = self.unravel(flat);
            let mut pos = 0;
            for &a in axes {
                pos = pos * self.dims[a] + idx[a];
            }
            out[pos] += p;
        }
        out
    }

    /// `MI(X; Y)` between two disjoint groups of axes.
    pub fn mutual_info_axes(&self, x: &[usize], y: &[usize]) -> f64 {
        let mut both = x.to_vec();
        both.extend_from_slice(y);
        let mi = entropy(&self.marginal(x)) + entropy(&self.marginal(y)) - entropy(&self.marginal(&both));
        mi.max(0.0)
    }

    /// `MI(P^1, ..., P^K; Y)`.
    pub fn joint_mi(&self) -> f64 {
        let parts: Vec<usize> = (0..self.num_parts()).collect();
        self.mutual_info_axes(&parts, &[self.target_axis()])
    }

    /// `MI(P^k; Y)`.
    pub fn part_mi(&self, k: usize) -> f64 {
        self.mutual_info_axes(&[k], &[self.target_axis()])
    }

    /// Largest deviation of the parts' joint marginal from the product of
    /// their individual marginals.
    pub fn factorization_error(&self) -> f64 {
        let parts: Vec<usize> = (0..self.num_parts()).collect();
        let joint = self.marginal(&parts);
        let singles: Vec<Vec<f64>> = parts.iter().map(|&k| self.marginal(&[k])).collect();
        let mut worst: f64 = 0.0;
        for (flat, &p) in joint.iter().enumerate() {
            let mut rem = flat;
            let mut prod = 1.0;
            for k in (0..parts.len()).rev() {
                let d = self.dims[k];
                prod *= singles[k][rem % d];
                rem /= d;
            }
            worst = worst.max((p - prod).abs());
        }
        worst
    }
}

/// `MI(X; Y)` of a joint table `pxy` with `nx` rows and `ny` columns.
pub fn mutual_info(pxy: &[f64], nx: usize, ny: usize) -> Result<f64> {
    DiscreteJoint::new(vec![nx, ny], pxy.to_vec()).map(|j| j.mutual_info_axes(&[0], &[1]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowerBoundReport {
    pub joint_mi: f64,
    pub sum_marginal_mi: f64,
    /// `joint_mi - sum_marginal_mi`; nonnegative up to rounding.
    pub gap: f64,
    pub holds: bool,
}

impl fmt::Display for LowerBoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "MI(parts;Y) = {:.12}  sum MI(part;Y) = {:.12}  gap = {:.3e} ({})",
            self.joint_mi,
            self.sum_marginal_mi,
            self.gap,
            if self.holds { "bound holds" } else { "BOUND VIOLATED" }
        )
    }
}

/// Checks `MI(P^1..P^K; Y) >= sum_k MI(P^k; Y)` for jointly independent
/// parts. The bound is an inequality: equality fails in general.
pub fn verify_lower_bound(joint: &DiscreteJoint) -> Result<LowerBoundReport> {
    let err = joint.factorization_error();
    if err > FACTORIZATION_TOL {
        return Err(Error::Precondition(format!(
            "parts are not jointly independent (factorization error {err:e})"
        )));
    }
    let joint_mi = joint.joint_mi();
    let sum_marginal_mi: f64 = (0..joint.num_parts()).map(|k| joint.part_mi(k)).sum();
    let gap = joint_mi - sum_marginal_mi;
    Ok(LowerBoundReport {
        joint_mi,
        sum_marginal_mi,
        gap,
        holds: gap >= -LOWER_BOUND_TOL,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeBoundReport {
    /// `H(Y; Yhat | P)`.
    pub cond_ce: f64,
    /// `H(Y | P)`.
    pub cond_entropy: f64,
    /// `E_P KL(p(Y|P) || q(Y|P))`.
    pub kl: f64,
    pub bound_holds: bool,
    pub identity_error: f64,
}

/// Conditional cross-entropy against conditional entropy for a joint
/// `p(x, y)` (`nx x ny`) and a predictor `q(y | x)` (rows sum to one).
pub fn verify_ce_bound(pxy: &[f64], nx: usize, ny: usize, predictor: &[f64]) -> Result<CeBoundReport> {
    DiscreteJoint::new(vec![nx, ny], pxy.to_vec())?;
    if predictor.len() != nx * ny {
        return Err(Error::Shape(format!("{} predictor entries for {nx}x{ny}", predictor.len())));
    }
    for x in 0..nx {
        let row = &predictor[x * ny..(x + 1) * ny];
        let s: f64 = row.iter().sum();
        if row.iter().any(|&q| !(q >= 0.0)) || (s - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Invalid(format!("predictor row {x} is not a distribution")));
        }
    }
    let mut cond_ce = 0.0;
    let mut cond_entropy = 0.0;
    let mut kl = 0.0;
    for x in 0..nx {
        let px: f64 = pxy[x * ny..(x + 1) * ny].iter().sum();
        if px == 0.0 {
            continue;
        }
        for y in 0..ny {
            let p = pxy[x * ny + y];
            if p == 0.0 {
                continue;
            }
            let q = predictor[x * ny + y];
            if q == 0.0 {
                return Err(Error::Invalid(format!("predictor assigns zero to observed pair ({x}, {y})")));
            }
            let post = p / px;
            cond_ce -= p * q.ln();
            cond_entropy -= p * post.ln();
            kl += p * (post / q).ln();
        }
    }
    let identity_error = (cond_ce - cond_entropy - kl).abs();
    Ok(CeBoundReport {
        cond_ce,
        cond_entropy,
        kl,
        bound_holds: cond_ce >= cond_entropy - CE_BOUND_TOL,
        identity_error,
    })
}

fn random_simplex(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn renormalize(mut p: Vec<f64>) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Random joint with independent parts and an arbitrary conditional
/// `p(Y | P^1..P^K)`.
pub fn random_independent_joint(rng: &mut impl Rng) -> DiscreteJoint {
    let parts = rng.random_range(2..=3);
    let mut dims: Vec<usize> = (0..parts).map(|_| rng.random_range(2..=3)).collect();
    dims.push(rng.random_range(2..=4));
    let marginals: Vec<Vec<f64>> = dims[..parts].iter().map(|&d| random_simplex(d, rng)).collect();
    let ny = dims[parts];
    let cells: usize = dims[..parts].iter().product();
    let mut probs = Vec::with_capacity(cells * ny);
    for flat in 0..cells {
        let mut rem = flat;
        let mut pp = 1.0;
        for k in (0..parts).rev() {
            pp *= marginals[k][rem % dims[k]];
            rem /= dims[k];
        }
        let cond = random_simplex(ny, rng);
        probs.extend(cond.into_iter().map(|c| c * pp));
    }
    DiscreteJoint::new(dims, renormalize(probs)).expect("constructed joint is valid")
}

/// `Y = P^1 xor P^2` with independent uniform bits.
pub fn xor_witness() -> DiscreteJoint {
    let mut probs = vec![0.0; 8];
    for a in 0..2 {
        for b in 0..2 {
            probs[(a * 2 + b) * 2 + (a ^ b)] = 0.25;
        }
    }
    DiscreteJoint::new(vec![2, 2, 2], probs).expect("xor table is valid")
}

/// Random `(p(x, y), q(y | x))` pair.
pub fn random_predictor_pair(rng: &mut impl Rng) -> (Vec<f64>, usize, usize, Vec<f64>) {
    let nx = rng.random_range(2..=MAX_ALPHABET);
    let ny = rng.random_range(2..=MAX_ALPHABET);
    let pxy = random_simplex(nx * ny, rng);
    let mut q = Vec::with_capacity(nx * ny);
    for _ in 0..nx {
        q.extend(random_simplex(ny, rng));
    }
    (pxy, nx, ny, q)
}

/// Outcome of a randomized verification sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationSummary {
    pub trials: usize,
    pub seed: u64,
    pub lower_bound_failures: usize,
    /// Most negative gap observed (zero when none is negative).
    pub max_lower_bound_violation: f64,
    pub ce_failures: usize,
    pub max_ce_violation: f64,
    pub max_identity_error: f64,
    pub xor: LowerBoundReport,
}

impl VerificationSummary {
    pub fn passed(&self) -> bool {
        self.lower_bound_failures == 0
            && self.ce_failures == 0
            && self.max_identity_error <= KL_IDENTITY_TOL
            && (self.xor.gap - std::f64::consts::LN_2).abs() <= KL_IDENTITY_TOL
    }
}

impl fmt::Display for VerificationSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "trials: {} (seed {})", self.trials, self.seed)?;
        writeln!(
            f,
            "lower bound MI(parts;Y) >= sum MI(part;Y): {} failures, max violation {:.3e}",
            self.lower_bound_failures, self.max_lower_bound_violation
        )?;
        writeln!(
            f,
            "cross-entropy bound H(Y;Yhat|P) >= H(Y|P): {} failures, max violation {:.3e}, max KL identity error {:.3e}",
            self.ce_failures, self.max_ce_violation, self.max_identity_error
        )?;
        writeln!(f, "xor witness: {}", self.xor)?;
        writeln!(
            f,
            "note: the bound is strict for the xor witness, so only the inequality is checked; \
             parts are required to be jointly independent, not merely pairwise"
        )?;
        write!(f, "result: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Runs `trials` random lower-bound and cross-entropy checks.
pub fn run_verification(trials: usize, seed: u64) -> Result<VerificationSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lb_fail = 0;
    let mut lb_worst: f64 = 0.0;
    let mut ce_fail = 0;
    let mut ce_worst: f64 = 0.0;
    let mut id_worst: f64 = 0.0;
    for _ in 0..trials {
        let joint = random_independent_joint(&mut rng);
        let r = verify_lower_bound(&joint)?;
        if !r.holds {
            lb_fail += 1;
        }
        lb_worst = lb_worst.max(-r.gap);
        let (pxy, nx, ny, q) = random_predictor_pair(&mut rng);
        let c = verify_ce_bound(&pxy, nx, ny, &q)?;
        if !c.bound_holds {
            ce_fail += 1;
        }
        ce_worst = ce_worst.max(c.cond_entropy - c.cond_ce);
        id_worst = id_worst.max(c.identity_error);
    }
    Ok(VerificationSummary {
        trials,
        seed,
        lower_bound_failures: lb_fail,
        max_lower_bound_violation: lb_worst,
        ce_failures: ce_fail,
        max_ce_violation: ce_worst.max(0.0),
        max_identity_error: id_worst,
        xor: verify_lower_bound(&xor_witness())?,
    })
}
