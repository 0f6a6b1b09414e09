//! The Tsallis entropy and loss family.
//!
//! For an entropy index `ψ > 1` and a prediction `p` on the `K`-simplex:
//!
//! ```text
//! e_ψ(p)    = (1 - Σ_j p_j^ψ) / (ψ - 1)
//! ℓ_ψ(p, z) = (1 - p_z^(ψ-1)) / (ψ - 1)
//! ```
//!
//! As `ψ → 1` these recover the Gibbs entropy and the cross-entropy; at
//! `ψ = 2` the entropy is the Gini impurity. Within [`TAU_LIMIT`] of 1 the
//! quotients are 0/0 in floating point, so the analytic limits are returned
//! instead.
//!
//! Every probability vector is floored at [`PROB_FLOOR`] before use so that
//! `ln p` and `p^(ψ-2)` stay finite.

use crate::error::{MtemError, Result};

/// Distance from `ψ = 1` below which the analytic limits are used.
pub const TAU_LIMIT: f64 = 1e-4;

/// Smallest probability any class may carry.
pub const PROB_FLOOR: f64 = 1e-7;

/// Tolerance on `Σ p = 1` when validating caller-supplied probabilities.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Default upper bound on learnable entropy indexes.
pub const DEFAULT_PSI_MAX: f64 = 10.0;

/// Index of a class, `0 <= z < K`.
pub type ClassIndex = usize;

/// A point on the probability simplex with every entry at least [`PROB_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionProbs(Vec<f64>);

impl PredictionProbs {
    /// Validates `probs` as a simplex point and applies the probability floor.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(MtemError::domain(format!(
                "a prediction needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some(bad) = probs.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(MtemError::domain(format!(
                "probabilities must be finite and non-negative, found {bad}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(MtemError::domain(format!(
                "probabilities must sum to 1, sum is {sum}"
            )));
        }
        Ok(Self::floored(probs))
    }

    /// Clamps entries to at least [`PROB_FLOOR`] and rescales the remaining
    /// entries so the vector sums to one. Entries already above the floor are
    /// left untouched when no clamping is needed.
    ///
    /// The input must be non-negative and sum to (approximately) one.
    pub(crate) fn floored(mut probs: Vec<f64>) -> Self {
        let k = probs.len();
        let mut pinned = vec![false; k];
        loop {
            let mut changed = false;
            for (v, pin) in probs.iter_mut().zip(pinned.iter_mut()) {
                if !*pin && *v < PROB_FLOOR {
                    *v = PROB_FLOOR;
                    *pin = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let n_pinned = pinned.iter().filter(|p| **p).count();
            let free_mass: f64 = probs
                .iter()
                .zip(&pinned)
                .filter(|(_, p)| !**p)
                .map(|(v, _)| *v)
                .sum();
            let target = 1.0 - n_pinned as f64 * PROB_FLOOR;
            if free_mass <= 0.0 {
                break;
            }
            let scale = target / free_mass;
            for (v, _) in probs.iter_mut().zip(&pinned).filter(|(_, p)| !**p) {
                *v *= scale;
            }
        }
        PredictionProbs(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Number of classes `K`.
    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Probability of class `z`, or a domain error when `z >= K`.
    pub fn get(&self, z: ClassIndex) -> Result<f64> {
        self.0.get(z).copied().ok_or_else(|| {
            MtemError::domain(format!(
                "class index {z} out of range for {} classes",
                self.0.len()
            ))
        })
    }

    /// Most probable class, ties broken toward the lowest index.
    pub fn argmax(&self) -> ClassIndex {
        let mut best = 0;
        for (k, v) in self.0.iter().enumerate().skip(1) {
            if *v > self.0[best] {
                best = k;
            }
        }
        best
    }
}

/// An entropy index `ψ > 1`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct EntropyIndex(f64);

impl EntropyIndex {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value <= 1.0 {
            return Err(MtemError::domain(format!(
                "entropy index must be finite and > 1, got {value}"
            )));
        }
        Ok(EntropyIndex(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `ψ - 1`.
    pub fn excess(self) -> f64 {
        self.0 - 1.0
    }

    /// True when the index is close enough to 1 that the analytic limits apply.
    pub fn in_limit_band(self) -> bool {
        self.excess() < TAU_LIMIT
    }
}

/// Tsallis entropy `e_ψ(p)`.
pub fn tsallis_entropy(p: &PredictionProbs, psi: EntropyIndex) -> f64 {
    if psi.in_limit_band() {
        return gibbs_entropy(p);
    }
    let power_sum: f64 = p.0.iter().map(|v| (psi.value() * v.ln()).exp()).sum();
    (1.0 - power_sum) / psi.excess()
}

/// Gibbs (Shannon) entropy in nats, `0 ln 0 = 0`.
pub fn gibbs_entropy(p: &PredictionProbs) -> f64 {
    -p.0.iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// Gini impurity `1 - Σ p²`, the `ψ = 2` member of the family.
pub fn gini_impurity(p: &PredictionProbs) -> f64 {
    1.0 - p.0.iter().map(|v| v * v).sum::<f64>()
}

/// Tsallis loss `ℓ_ψ(p, y)`.
pub fn tsallis_loss(p: &PredictionProbs, y: ClassIndex, psi: EntropyIndex) -> Result<f64> {
    Ok(tsallis_loss_from_prob(p.get(y)?, psi))
}

/// Cross-entropy `-ln p_y`.
pub fn cross_entropy(p: &PredictionProbs, y: ClassIndex) -> Result<f64> {
    let pz = p.get(y)?;
    if pz < PROB_FLOOR * (1.0 - 1e-9) {
        return Err(MtemError::domain(format!(
            "probability {pz} of class {y} is below the floor"
        )));
    }
    Ok(-pz.ln())
}

/// Tsallis loss as a function of the labelled class probability alone.
///
/// No simplex validation happens here; finite-difference checks perturb
/// `pz` directly through this entry point.
pub fn tsallis_loss_from_prob(pz: f64, psi: EntropyIndex) -> f64 {
    let ce = -pz.ln();
    if psi.in_limit_band() {
        return ce;
    }
    let a = psi.excess();
    // 1 - p^a = -expm1(a ln p)
    -(-a * ce).exp_m1() / a
}

/// `dℓ_ψ/dp_z` for the labelled class probability.
pub fn tsallis_loss_grad_from_prob(pz: f64, psi: EntropyIndex) -> f64 {
    if psi.in_limit_band() {
        return -1.0 / pz;
    }
    -((psi.value() - 2.0) * pz.ln()).exp()
}

/// Gradient of `ℓ_ψ(p, y)` with respect to `p`, all other entries held fixed.
pub fn tsallis_loss_grad_p(
    p: &PredictionProbs,
    y: ClassIndex,
    psi: EntropyIndex,
) -> Result<Vec<f64>> {
    let pz = p.get(y)?;
    let mut grad = vec![0.0; p.num_classes()];
    grad[y] = tsallis_loss_grad_from_prob(pz, psi);
    Ok(grad)
}

/// Closed-form `∂ℓ_ψ(p, y)/∂ψ = (ℓ_1 - ℓ_ψ)/(ψ - 1) - ℓ_1·ℓ_ψ`.
///
/// The quotient is singular at `ψ = 1`, so indexes inside the limit band are
/// rejected.
pub fn tsallis_loss_grad_psi(p: &PredictionProbs, y: ClassIndex, psi: EntropyIndex) -> Result<f64> {
    let pz = p.get(y)?;
    tsallis_loss_grad_psi_from_prob(pz, psi)
}

pub(crate) fn tsallis_loss_grad_psi_from_prob(pz: f64, psi: EntropyIndex) -> Result<f64> {
    if psi.in_limit_band() {
        return Err(MtemError::domain(format!(
            "entropy-index gradient is singular at ψ = {} (within {TAU_LIMIT} of 1)",
            psi.value()
        )));
    }
    let ce = -pz.ln();
    let loss = tsallis_loss_from_prob(pz, psi);
    Ok((ce - loss) / psi.excess() - ce * loss)
}

/// `Σ_k p_k·ℓ_ψ(p, k)`: the entropy written as the expected loss under
/// pseudo-labels drawn from `p` itself.
pub fn entropy_via_expectation(p: &PredictionProbs, psi: EntropyIndex) -> f64 {
    p.0.iter()
        .map(|pk| pk * tsallis_loss_from_prob(*pk, psi))
        .sum()
}
