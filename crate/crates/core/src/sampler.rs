//! Annealed pseudo-label generation.
//!
//! The temperature follows a sigmoid schedule
//! `κ_t = κ_max - (κ_max - κ_min)·σ(s - 2s·t/T_max)` with `σ(x) = 1/(1 + eˣ)`,
//! which starts at (almost) `κ_max` and settles at (almost) `κ_min`.
//! Pseudo-labels are drawn from the prediction re-sharpened at that
//! temperature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MtemError, Result};
use crate::model::softmax_tempered;
use crate::tsallis::{ClassIndex, PredictionProbs};

/// Smallest sigmoid sharpness accepted by [`TemperatureSchedule::new`].
pub const MIN_SHARPNESS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub kappa_max: f64,
    pub kappa_min: f64,
    /// Sigmoid sharpness `s`.
    pub s: f64,
    pub t_max: usize,
}

impl TemperatureSchedule {
    pub fn new(kappa_max: f64, kappa_min: f64, s: f64, t_max: usize) -> Result<Self> {
        let sched = TemperatureSchedule {
            kappa_max,
            kappa_min,
            s,
            t_max,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_min > 0.0 && self.kappa_min.is_finite()) {
            return Err(MtemError::config("kappa_min", "must be positive"));
        }
        if !(self.kappa_max >= self.kappa_min && self.kappa_max.is_finite()) {
            return Err(MtemError::config("kappa_max", "must be at least kappa_min"));
        }
        if !(self.s >= MIN_SHARPNESS && self.s.is_finite()) {
            return Err(MtemError::config(
                "s",
                format!("sharpness must be at least {MIN_SHARPNESS}, got {}", self.s),
            ));
        }
        if self.t_max == 0 {
            return Err(MtemError::config("t_max", "schedule horizon must be positive"));
        }
        Ok(())
    }
}

/// `σ(x) = 1/(1 + eˣ)`; decreasing in `x`.
fn sigma(x: f64) -> f64 {
    1.0 / (1.0 + x.exp())
}

/// Temperature at iteration `t ∈ [0, T_max]`.
pub fn temperature_at(sched: &TemperatureSchedule, t: usize) -> Result<f64> {
    if t > sched.t_max {
        return Err(MtemError::domain(format!(
            "iteration {t} outside schedule range [0, {}]",
            sched.t_max
        )));
    }
    let arg = sched.s - 2.0 * sched.s * t as f64 / sched.t_max as f64;
    let kappa = sched.kappa_max - (sched.kappa_max - sched.kappa_min) * sigma(arg);
    Ok(kappa.clamp(sched.kappa_min, sched.kappa_max))
}

/// Re-sharpens a prediction: `softmax(ln p / κ)`.
pub fn temper(p: &PredictionProbs, kappa: f64) -> Result<PredictionProbs> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(MtemError::domain(format!(
            "temperature must be positive and finite, got {kappa}"
        )));
    }
    let logits: Vec<f64> = p.as_slice().iter().map(|v| v.ln()).collect();
    Ok(PredictionProbs::floored(softmax_tempered(&logits, kappa)))
}

/// Deterministic random stream for batch and pseudo-label sampling.
#[derive(Debug, Clone)]
pub struct RngState(ChaCha8Rng);

impl RngState {
    pub fn from_seed(seed: u64) -> Self {
        RngState(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream for worker `index`: seeded with `seed + index`.
    pub fn for_worker(seed: u64, index: u64) -> Self {
        Self::from_seed(seed.wrapping_add(index))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    /// Uniform index in `[0, n)`; `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }
}

/// Inverse-CDF draw of a class from `p`, one uniform per label.
pub fn sample_pseudo_label(p: &PredictionProbs, rng: &mut RngState) -> ClassIndex {
    let u = rng.uniform();
    let mut cumulative = 0.0;
    let probs = p.as_slice();
    for (k, v) in probs.iter().enumerate() {
        cumulative += v;
        if u < cumulative {
            return k;
        }
    }
    probs.len() - 1
}

/// Argmax pseudo-label, ties toward the lowest index.
pub fn greedy_pseudo_label(p: &PredictionProbs) -> ClassIndex {
    p.argmax()
}
