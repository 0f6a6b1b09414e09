//! Linear softmax classifier over sparse features with a hand-written
//! backward pass.
//!
//! Parameters are stored as one flat vector: the `K × d` weight matrix in
//! row-major order followed by the `K` biases. All arithmetic the training
//! loops need (SGD steps, Taylor perturbations) is done on that flat view.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MtemError, Result};
use crate::tsallis::{
    tsallis_loss_from_prob, tsallis_loss_grad_from_prob, ClassIndex, EntropyIndex,
    PredictionProbs,
};

/// Standard deviation of the Gaussian initialisation.
pub const INIT_STD: f64 = 0.01;

/// Flat classifier parameters: weights then biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    k: usize,
    d: usize,
    data: Vec<f64>,
}

/// Gradients live in the same flat layout as the parameters.
pub type ParameterGradient = ParameterVector;

impl ParameterVector {
    pub fn zeros(k: usize, d: usize) -> Result<Self> {
        check_dims(k, d)?;
        Ok(ParameterVector {
            k,
            d,
            data: vec![0.0; k * d + k],
        })
    }

    /// Builds parameters from a `K × d` weight matrix and `K` biases.
    pub fn from_parts(weights: &[Vec<f64>], biases: &[f64]) -> Result<Self> {
        let k = weights.len();
        let d = weights.first().map_or(0, Vec::len);
        check_dims(k, d)?;
        if biases.len() != k {
            return Err(MtemError::DimensionMismatch {
                what: "bias vector",
                expected: k,
                found: biases.len(),
            });
        }
        let mut data = Vec::with_capacity(k * d + k);
        for row in weights {
            if row.len() != d {
                return Err(MtemError::DimensionMismatch {
                    what: "weight row",
                    expected: d,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        data.extend_from_slice(biases);
        Self::from_flat(k, d, data)
    }

    pub fn from_flat(k: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(k, d)?;
        if data.len() != k * d + k {
            return Err(MtemError::DimensionMismatch {
                what: "flat parameter vector",
                expected: k * d + k,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MtemError::NonFinite("parameter vector"));
        }
        Ok(ParameterVector { k, d, data })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Length of the flat view, `K·d + K`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn weight(&self, class: usize, feature: usize) -> f64 {
        self.data[class * self.d + feature]
    }

    pub fn bias(&self, class: usize) -> f64 {
        self.data[self.k * self.d + class]
    }

    /// Returns a copy with flat coordinate `i` replaced.
    pub fn with_coordinate(&self, i: usize, value: f64) -> Self {
        let mut out = self.clone();
        out.data[i] = value;
        out
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.k != other.k || self.d != other.d {
            return Err(MtemError::DimensionMismatch {
                what: "parameter shape (K·d + K)",
                expected: self.len(),
                found: other.len(),
            });
        }
        Ok(())
    }

    fn weights_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        self.data.split_at_mut(self.k * self.d)
    }
}

fn check_dims(k: usize, d: usize) -> Result<()> {
    if k < 2 {
        return Err(MtemError::config("k", format!("need at least 2 classes, got {k}")));
    }
    if d < 1 {
        return Err(MtemError::config("d", "feature dimension must be at least 1"));
    }
    Ok(())
}

/// Sparse input vector with strictly increasing feature indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatures {
    dim: usize,
    entries: Vec<(u32, f64)>,
}

impl SparseFeatures {
    pub fn new(dim: usize, entries: Vec<(u32, f64)>) -> Result<Self> {
        for w in entries.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(MtemError::domain(format!(
                    "feature indices must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some((i, _)) = entries.iter().find(|(i, _)| *i as usize >= dim) {
            return Err(MtemError::DimensionMismatch {
                what: "feature index bound",
                expected: dim,
                found: *i as usize,
            });
        }
        if entries.iter().any(|(_, v)| !v.is_finite()) {
            return Err(MtemError::NonFinite("feature values"));
        }
        Ok(SparseFeatures { dim, entries })
    }

    pub fn empty(dim: usize) -> Self {
        SparseFeatures {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }
}

/// A labelled example for the supervised loss.
#[derive(Debug, Clone, Copy)]
pub struct LabeledExample<'a> {
    pub features: &'a SparseFeatures,
    pub label: ClassIndex,
}

/// A pseudo-labelled example together with its entropy index.
#[derive(Debug, Clone, Copy)]
pub struct TsallisExample<'a> {
    pub features: &'a SparseFeatures,
    pub label: ClassIndex,
    pub psi: EntropyIndex,
}

fn check_input(params: &ParameterVector, x: &SparseFeatures) -> Result<()> {
    if x.dim != params.d {
        return Err(MtemError::DimensionMismatch {
            what: "feature dimension d",
            expected: params.d,
            found: x.dim,
        });
    }
    Ok(())
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(MtemError::domain(format!(
            "temperature must be positive and finite, got {kappa}"
        )));
    }
    Ok(())
}

/// Class scores `W·x + b`.
pub fn scores(params: &ParameterVector, x: &SparseFeatures) -> Result<Vec<f64>> {
    check_input(params, x)?;
    Ok(scores_unchecked(params, x))
}

fn scores_unchecked(params: &ParameterVector, x: &SparseFeatures) -> Vec<f64> {
    (0..params.k)
        .map(|c| {
            let row = &params.data[c * params.d..(c + 1) * params.d];
            params.bias(c)
                + x.entries
                    .iter()
                    .map(|(j, v)| row[*j as usize] * v)
                    .sum::<f64>()
        })
        .collect()
}

/// Numerically stable `softmax(logits / kappa)` without flooring.
pub(crate) fn softmax_tempered(logits: &[f64], kappa: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|s| ((s - max) / kappa).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// `softmax(scores / κ)`, floored and renormalised.
pub fn predict(params: &ParameterVector, x: &SparseFeatures, kappa: f64) -> Result<PredictionProbs> {
    check_input(params, x)?;
    check_kappa(kappa)?;
    Ok(PredictionProbs::floored(softmax_tempered(
        &scores_unchecked(params, x),
        kappa,
    )))
}

/// Unfloored and floored `softmax(scores)`. The Jacobian uses the former so
/// saturated predictions give exactly zero gradient.
fn forward(params: &ParameterVector, x: &SparseFeatures) -> Result<(Vec<f64>, PredictionProbs)> {
    check_input(params, x)?;
    let raw = softmax_tempered(&scores_unchecked(params, x), 1.0);
    let p = PredictionProbs::floored(raw.clone());
    Ok((raw, p))
}

/// Adds `weight · dL/dθ` for one input into `grad`, given the prediction `p`
/// the loss was evaluated at.
fn accumulate_backward(
    grad: &mut ParameterGradient,
    x: &SparseFeatures,
    p: &[f64],
    dl_dp: &[f64],
    kappa: f64,
    weight: f64,
) {
    let inner: f64 = dl_dp.iter().zip(p).map(|(g, q)| g * q).sum();
    let d = grad.d;
    let (weights, biases) = grad.weights_mut();
    for (c, (pc, gc)) in p.iter().zip(dl_dp).enumerate() {
        let dscore = weight * pc * (gc - inner) / kappa;
        if dscore == 0.0 {
            continue;
        }
        biases[c] += dscore;
        let row = &mut weights[c * d..(c + 1) * d];
        for (j, v) in &x.entries {
            row[*j as usize] += dscore * v;
        }
    }
}

/// Chain rule through the tempered softmax: maps `dL/dp` to `dL/dθ`.
pub fn backward(
    params: &ParameterVector,
    x: &SparseFeatures,
    dl_dp: &[f64],
    kappa: f64,
) -> Result<ParameterGradient> {
    if dl_dp.len() != params.k {
        return Err(MtemError::DimensionMismatch {
            what: "dL/dp length",
            expected: params.k,
            found: dl_dp.len(),
        });
    }
    check_input(params, x)?;
    check_kappa(kappa)?;
    let raw = softmax_tempered(&scores_unchecked(params, x), kappa);
    let mut grad = ParameterVector::zeros(params.k, params.d)?;
    accumulate_backward(&mut grad, x, &raw, dl_dp, kappa, 1.0);
    Ok(grad)
}

fn check_label(params: &ParameterVector, label: ClassIndex) -> Result<()> {
    if label >= params.k {
        return Err(MtemError::domain(format!(
            "label {label} out of range for {} classes",
            params.k
        )));
    }
    Ok(())
}

/// Mean Tsallis loss over a pseudo-labelled batch and its gradient in `θ`.
pub fn grad_theta_tsallis_batch(
    params: &ParameterVector,
    batch: &[TsallisExample<'_>],
) -> Result<(f64, ParameterGradient)> {
    if batch.is_empty() {
        return Err(MtemError::Empty("tsallis batch"));
    }
    let weight = 1.0 / batch.len() as f64;
    let mut grad = ParameterVector::zeros(params.k, params.d)?;
    let mut loss = 0.0;
    let mut dl_dp = vec![0.0; params.k];
    for ex in batch {
        check_label(params, ex.label)?;
        let (raw, p) = forward(params, ex.features)?;
        let pz = p.as_slice()[ex.label];
        loss += tsallis_loss_from_prob(pz, ex.psi);
        dl_dp.fill(0.0);
        dl_dp[ex.label] = tsallis_loss_grad_from_prob(pz, ex.psi);
        accumulate_backward(&mut grad, ex.features, &raw, &dl_dp, 1.0, weight);
    }
    Ok((loss * weight, grad))
}

/// Mean cross-entropy over a labelled batch and its gradient in `θ`.
pub fn grad_theta_supervised_batch(
    params: &ParameterVector,
    batch: &[LabeledExample<'_>],
) -> Result<(f64, ParameterGradient)> {
    if batch.is_empty() {
        return Err(MtemError::Empty("supervised batch"));
    }
    let weight = 1.0 / batch.len() as f64;
    let mut grad = ParameterVector::zeros(params.k, params.d)?;
    let mut loss = 0.0;
    let mut dl_dp = vec![0.0; params.k];
    for ex in batch {
        check_label(params, ex.label)?;
        let (raw, p) = forward(params, ex.features)?;
        let pz = p.as_slice()[ex.label];
        loss -= pz.ln();
        dl_dp.fill(0.0);
        dl_dp[ex.label] = -1.0 / pz;
        accumulate_backward(&mut grad, ex.features, &raw, &dl_dp, 1.0, weight);
    }
    Ok((loss * weight, grad))
}

/// Mean cross-entropy over a labelled batch, no gradient.
pub fn supervised_loss(params: &ParameterVector, batch: &[LabeledExample<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(MtemError::Empty("supervised batch"));
    }
    let mut loss = 0.0;
    for ex in batch {
        check_label(params, ex.label)?;
        let p = predict(params, ex.features, 1.0)?;
        loss -= p.as_slice()[ex.label].ln();
    }
    Ok(loss / batch.len() as f64)
}

/// `params - lr · grad`.
pub fn sgd_step(
    params: &ParameterVector,
    grad: &ParameterGradient,
    lr: f64,
) -> Result<ParameterVector> {
    if lr.is_nan() || lr < 0.0 {
        return Err(MtemError::domain(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    let mut out = params.clone();
    out.axpy(-lr, grad)?;
    Ok(out)
}

/// `params + eps · direction`.
pub fn perturb(
    params: &ParameterVector,
    direction: &ParameterGradient,
    eps: f64,
) -> Result<ParameterVector> {
    let mut out = params.clone();
    out.axpy(eps, direction)?;
    Ok(out)
}

/// Gaussian initialisation, mean 0 and std [`INIT_STD`], deterministic in `seed`.
pub fn init_params(k: usize, d: usize, seed: u64) -> Result<ParameterVector> {
    check_dims(k, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal parameters");
    let data = (0..k * d + k).map(|_| normal.sample(&mut rng)).collect();
    ParameterVector::from_flat(k, d, data)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MTEMCKPT";
const CHECKPOINT_HEADER_LEN: usize = 16;

/// Serialises parameters: magic, `K` and `d` as little-endian `u32`, then the
/// flat vector as little-endian `f64`.
pub fn checkpoint_bytes(params: &ParameterVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.k as u32).to_le_bytes());
    out.extend_from_slice(&(params.d as u32).to_le_bytes());
    for v in &params.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<ParameterVector> {
    let bad = |message: String| MtemError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < CHECKPOINT_HEADER_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing MTEMCKPT header".into()));
    }
    let k = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[CHECKPOINT_HEADER_LEN..];
    let expected = (k * d + k) * 8;
    if body.len() != expected {
        return Err(bad(format!(
            "expected {expected} payload bytes for K={k}, d={d}, found {}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ParameterVector::from_flat(k, d, data).map_err(|e| bad(e.to_string()))
}

pub fn save_checkpoint(params: &ParameterVector, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(params)).map_err(|e| MtemError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterVector> {
    let bytes = fs::read(path).map_err(|e| MtemError::io(path, e))?;
    parse_checkpoint(&bytes, path)
}
