//! Meta-learned entropy indexes.
//!
//! Each unlabeled target instance `i` owns an entropy index `ψ_i`. One
//! training step:
//!
//! 1. draw a target batch `B` and a source validation batch `V`;
//! 2. draw pseudo-labels for `B` from the prediction at temperature `κ_t`;
//! 3. take a virtual SGD step `θ̂ = θ - η_t ∇_θ L_T(θ, ψ | B)`;
//! 4. estimate `∂L_S(θ̂ | V)/∂ψ` with a symmetric Taylor difference and
//!    take a projected step on `ψ`;
//! 5. take the real step on `θ` with the updated `ψ` and the same labels.
//!
//! The second-order term `∇_θ̂ L_S · ∂²L_T/∂θ∂ψ` is replaced by
//! `[∇_ψ L_T(θ⁺) - ∇_ψ L_T(θ⁻)] / 2ε` with `θ± = θ ± ε ∇_θ̂ L_S`, and
//! `∇_ψ L_T` comes from the closed form in [`crate::tsallis`], so no
//! Hessian is ever formed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, Dataset, Instance};
use crate::error::{MtemError, Result};
use crate::model::{
    grad_theta_supervised_batch, grad_theta_tsallis_batch, perturb, predict, sgd_step,
    LabeledExample, ParameterGradient, ParameterVector, SparseFeatures, TsallisExample,
};
use crate::sampler::{
    greedy_pseudo_label, sample_pseudo_label, temperature_at, RngState, TemperatureSchedule,
};
use crate::tsallis::{
    tsallis_loss_grad_psi_from_prob, ClassIndex, EntropyIndex, DEFAULT_PSI_MAX, TAU_LIMIT,
};

pub const DEFAULT_PSI_MIN_GAP: f64 = 0.001;

/// Offsets added to the master seed for each independent random stream.
pub mod streams {
    pub const DATA: u64 = 0;
    pub const INIT: u64 = 1;
    pub const TARGET_BATCH: u64 = 2;
    pub const SOURCE_BATCH: u64 = 3;
    pub const PSEUDO_LABEL: u64 = 4;
    pub const SOURCE_TRAIN: u64 = 5;
}

/// Per-instance entropy indexes `ψ`, indexed by target instance id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyIndexTable {
    values: Vec<f64>,
}

/// Summary statistics of an [`EntropyIndexTable`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl EntropyIndexTable {
    pub fn new(len: usize, init: f64) -> Result<Self> {
        EntropyIndex::new(init)?;
        Ok(EntropyIndexTable {
            values: vec![init; len],
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, id: usize) -> Result<EntropyIndex> {
        let v = self
            .values
            .get(id)
            .copied()
            .ok_or(MtemError::MissingEntropyIndex(id))?;
        EntropyIndex::new(v)
    }

    /// Copy with entry `id` replaced by `value`.
    pub fn with_value(&self, id: usize, value: f64) -> Result<Self> {
        EntropyIndex::new(value)?;
        let mut next = self.clone();
        *next
            .values
            .get_mut(id)
            .ok_or(MtemError::MissingEntropyIndex(id))? = value;
        Ok(next)
    }

    pub fn stats(&self) -> Option<PsiStats> {
        if self.values.is_empty() {
            return None;
        }
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        let var = self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let (min, max) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        Some(PsiStats {
            mean,
            std: var.sqrt(),
            min,
            max,
        })
    }
}

/// `η_t = min(1, k1/t)` and `β_t = min(β_max, k2·t^(-2/3))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRateSchedules {
    pub k1: f64,
    pub k2: f64,
    /// Stand-in for the unknown `1/L` cap on `β_t`.
    pub beta_max: f64,
}

impl LearningRateSchedules {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("k1", self.k1), ("k2", self.k2), ("beta_max", self.beta_max)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MtemError::config(field, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn eta(&self, t: usize) -> Result<f64> {
        lr_eta(t, self.k1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        lr_beta(t, self.k2, self.beta_max)
    }
}

fn check_step_index(t: usize) -> Result<()> {
    if t < 1 {
        return Err(MtemError::domain("learning-rate schedules start at t = 1"));
    }
    Ok(())
}

pub fn lr_eta(t: usize, k1: f64) -> Result<f64> {
    check_step_index(t)?;
    Ok(f64::min(1.0, k1 / t as f64))
}

pub fn lr_beta(t: usize, k2: f64, beta_max: f64) -> Result<f64> {
    check_step_index(t)?;
    Ok(f64::min(beta_max, k2 / (t as f64).powf(2.0 / 3.0)))
}

/// Hyperparameters shared by every trainer in this module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtemConfig {
    pub schedules: LearningRateSchedules,
    pub psi_init: f64,
    /// Lower clamp gap: `ψ ≥ 1 + psi_min_gap`.
    pub psi_min_gap: f64,
    pub psi_max: f64,
    /// Annealing temperatures; its horizon is always taken from `t_max`.
    pub temp: TemperatureSchedule,
    pub batch_size_target: usize,
    pub batch_size_valid: usize,
    pub t_max: usize,
    /// Taylor step is `ε = eps_rule_scale / ‖∇_θ̂ L_S‖`.
    pub eps_rule_scale: f64,
    pub seed: u64,
    /// When false, `ψ` stays at `psi_init` (no outer loop).
    pub update_psi: bool,
    /// Weight of a source cross-entropy term added to both `θ` steps of
    /// [`mtem_train`], on a source batch drawn apart from `V`. Zero gives
    /// the pure target update.
    pub source_weight: f64,
}

impl Default for MtemConfig {
    fn default() -> Self {
        MtemConfig {
            schedules: LearningRateSchedules {
                k1: 1000.0,
                k2: 0.1,
                beta_max: 0.1,
            },
            psi_init: 2.0,
            psi_min_gap: DEFAULT_PSI_MIN_GAP,
            psi_max: DEFAULT_PSI_MAX,
            temp: TemperatureSchedule {
                kappa_max: 0.3,
                kappa_min: 0.05,
                s: 10.0,
                t_max: 2000,
            },
            batch_size_target: 32,
            batch_size_valid: 32,
            t_max: 2000,
            eps_rule_scale: 0.01,
            seed: 0,
            update_psi: true,
            source_weight: 1.0,
        }
    }
}

impl MtemConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedules.validate()?;
        if !(self.psi_min_gap > TAU_LIMIT && self.psi_min_gap.is_finite()) {
            return Err(MtemError::config(
                "psi_min_gap",
                format!("must exceed {TAU_LIMIT} so the index gradient stays defined"),
            ));
        }
        if !(self.psi_max > 1.0 + self.psi_min_gap && self.psi_max.is_finite()) {
            return Err(MtemError::config("psi_max", "must exceed 1 + psi_min_gap"));
        }
        if !(self.psi_init > 1.0 + self.psi_min_gap && self.psi_init < self.psi_max) {
            return Err(MtemError::config(
                "psi_init",
                format!(
                    "must lie strictly inside (1 + psi_min_gap, psi_max) = ({}, {})",
                    1.0 + self.psi_min_gap,
                    self.psi_max
                ),
            ));
        }
        self.temperature_schedule().validate()?;
        if self.batch_size_target == 0 {
            return Err(MtemError::config("batch_size_target", "must be positive"));
        }
        if self.batch_size_valid == 0 {
            return Err(MtemError::config("batch_size_valid", "must be positive"));
        }
        if !(self.eps_rule_scale > 0.0 && self.eps_rule_scale.is_finite()) {
            return Err(MtemError::config("eps_rule_scale", "must be positive"));
        }
        if !(self.source_weight >= 0.0 && self.source_weight.is_finite()) {
            return Err(MtemError::config("source_weight", "must be non-negative"));
        }
        Ok(())
    }

    /// The temperature schedule with its horizon set to `t_max`.
    pub fn temperature_schedule(&self) -> TemperatureSchedule {
        TemperatureSchedule {
            t_max: self.t_max.max(1),
            ..self.temp
        }
    }

    pub fn psi_lower(&self) -> f64 {
        1.0 + self.psi_min_gap
    }
}

/// One row of a training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub eta: f64,
    pub beta: f64,
    pub kappa: f64,
    /// Target loss on the step's batch (0 for source-only training).
    pub loss_t: f64,
    /// Source loss on the step's validation batch.
    pub loss_s: f64,
    /// `‖∇_ψ L_S‖²` (0 when no index is learned).
    pub grad_psi_sq: f64,
    /// `‖∇_θ L_T‖²` of the committed step (source gradient for source-only).
    pub grad_theta_sq: f64,
    pub psi_mean: Option<f64>,
    pub psi_min: Option<f64>,
    pub psi_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub params: ParameterVector,
    /// Final entropy indexes; `None` for trainers that do not learn them.
    pub psi: Option<EntropyIndexTable>,
    pub trace: Vec<TraceRecord>,
}

impl TrainResult {
    /// Trace as CSV with a header row.
    pub fn trace_csv(&self) -> String {
        trace_to_csv(&self.trace)
    }
}

pub fn trace_to_csv(trace: &[TraceRecord]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    if trace.is_empty() {
        writer
            .write_record([
                "t", "eta", "beta", "kappa", "loss_t", "loss_s", "grad_psi_sq", "grad_theta_sq",
                "psi_mean", "psi_min", "psi_max",
            ])
            .expect("in-memory write");
    }
    for row in trace {
        writer.serialize(row).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// A target instance in a training batch with its frozen pseudo-label.
#[derive(Debug, Clone, Copy)]
pub struct TargetItem<'a> {
    pub id: usize,
    pub features: &'a SparseFeatures,
    pub pseudo: ClassIndex,
}

fn tsallis_examples<'a>(
    batch: &[TargetItem<'a>],
    psi: &EntropyIndexTable,
) -> Result<Vec<TsallisExample<'a>>> {
    batch
        .iter()
        .map(|item| {
            Ok(TsallisExample {
                features: item.features,
                label: item.pseudo,
                psi: psi.get(item.id)?,
            })
        })
        .collect()
}

/// Loss, gradient and the stepped parameters for `L_T(θ, ψ | B)`. A
/// fixed `extra` gradient (the weighted source term) joins the step.
fn target_step(
    theta: &ParameterVector,
    batch: &[TargetItem<'_>],
    psi: &EntropyIndexTable,
    eta: f64,
    extra: Option<&ParameterGradient>,
) -> Result<(f64, ParameterGradient, ParameterVector)> {
    let examples = tsallis_examples(batch, psi)?;
    let (loss, grad) = grad_theta_tsallis_batch(theta, &examples)?;
    let next = match extra {
        Some(extra) => {
            let mut total = grad.clone();
            total.axpy(1.0, extra)?;
            sgd_step(theta, &total, eta)?
        }
        None => sgd_step(theta, &grad, eta)?,
    };
    Ok((loss, grad, next))
}

/// Virtual step `θ̂ = θ - η ∇_θ L_T(θ, ψ | B)`.
pub fn inner_virtual_update(
    theta: &ParameterVector,
    batch: &[TargetItem<'_>],
    psi: &EntropyIndexTable,
    eta: f64,
) -> Result<ParameterVector> {
    target_step(theta, batch, psi, eta, None).map(|(_, _, next)| next)
}

/// Committed step with the updated indexes; identical arithmetic to
/// [`inner_virtual_update`].
pub fn actual_update_theta(
    theta: &ParameterVector,
    batch: &[TargetItem<'_>],
    psi_next: &EntropyIndexTable,
    eta: f64,
) -> Result<ParameterVector> {
    inner_virtual_update(theta, batch, psi_next, eta)
}

/// Per-instance `∂L_T/∂ψ_i` of the batch-mean loss at `params`. Repeated
/// draws of one instance accumulate.
fn batch_psi_gradient(
    params: &ParameterVector,
    batch: &[TargetItem<'_>],
    psi: &EntropyIndexTable,
) -> Result<BTreeMap<usize, f64>> {
    let scale = 1.0 / batch.len() as f64;
    let mut out = BTreeMap::new();
    for item in batch {
        let p = predict(params, item.features, 1.0)?;
        let pz = p.get(item.pseudo)?;
        let g = tsallis_loss_grad_psi_from_prob(pz, psi.get(item.id)?)?;
        *out.entry(item.id).or_insert(0.0) += scale * g;
    }
    Ok(out)
}

/// Taylor hypergradient given an already computed `θ̂`. Also returns
/// `L_S(θ̂ | V)`.
fn taylor_hypergrad(
    theta: &ParameterVector,
    theta_hat: &ParameterVector,
    batch: &[TargetItem<'_>],
    valid: &[LabeledExample<'_>],
    psi: &EntropyIndexTable,
    eta: f64,
    eps_rule_scale: f64,
) -> Result<(BTreeMap<usize, f64>, f64)> {
    if valid.is_empty() {
        return Err(MtemError::Empty("validation batch"));
    }
    let (loss_s, g_valid) = grad_theta_supervised_batch(theta_hat, valid)?;
    let norm = g_valid.norm();
    if norm == 0.0 || eta == 0.0 {
        // θ⁺ = θ⁻: the difference quotient, like the exact hypergradient, is zero.
        for item in batch {
            psi.get(item.id)?;
        }
        let zeros = batch.iter().map(|item| (item.id, 0.0)).collect();
        return Ok((zeros, loss_s));
    }
    let eps = eps_rule_scale / norm;
    let plus = perturb(theta, &g_valid, eps)?;
    let minus = perturb(theta, &g_valid, -eps)?;
    let at_plus = batch_psi_gradient(&plus, batch, psi)?;
    let at_minus = batch_psi_gradient(&minus, batch, psi)?;
    let grads = at_plus
        .into_iter()
        .map(|(id, gp)| {
            let gm = at_minus[&id];
            (id, -eta * (gp - gm) / (2.0 * eps))
        })
        .collect();
    Ok((grads, loss_s))
}

/// First-order estimate of `∂L_S(θ̂(ψ) | V)/∂ψ_i` for each instance in `B`.
///
/// Instances outside the batch get no entry: their hypergradient is zero.
pub fn hypergrad_psi_taylor(
    theta: &ParameterVector,
    batch: &[TargetItem<'_>],
    valid: &[LabeledExample<'_>],
    psi: &EntropyIndexTable,
    eta: f64,
    eps_rule_scale: f64,
) -> Result<BTreeMap<usize, f64>> {
    if valid.is_empty() {
        return Err(MtemError::Empty("validation batch"));
    }
    let theta_hat = inner_virtual_update(theta, batch, psi, eta)?;
    taylor_hypergrad(theta, &theta_hat, batch, valid, psi, eta, eps_rule_scale).map(|(g, _)| g)
}

/// Projected step `ψ_i ← clamp(ψ_i - β g_i, 1 + δ, ψ_max)` for every `i` in `grads`.
pub fn outer_update_psi(
    psi: &EntropyIndexTable,
    grads: &BTreeMap<usize, f64>,
    beta: f64,
    delta_psi: f64,
    psi_max: f64,
) -> Result<EntropyIndexTable> {
    if beta.is_nan() || beta < 0.0 {
        return Err(MtemError::domain(format!("β must be non-negative, got {beta}")));
    }
    let mut next = psi.clone();
    for (&id, &g) in grads {
        if !g.is_finite() {
            return Err(MtemError::NonFinite("entropy-index hypergradient"));
        }
        let slot = next
            .values
            .get_mut(id)
            .ok_or(MtemError::MissingEntropyIndex(id))?;
        *slot = (*slot - beta * g).clamp(1.0 + delta_psi, psi_max);
    }
    Ok(next)
}

fn check_inputs(config: &MtemConfig, source: &Dataset, target: Option<&Dataset>) -> Result<()> {
    config.validate()?;
    if source.is_empty() {
        return Err(MtemError::Empty("source dataset"));
    }
    if !source.is_fully_labeled() {
        return Err(MtemError::domain("source dataset must be fully labeled"));
    }
    if let Some(target) = target {
        if target.len() < config.batch_size_target {
            return Err(MtemError::domain(format!(
                "target dataset has {} instances, fewer than batch_size_target = {}",
                target.len(),
                config.batch_size_target
            )));
        }
        if target.dim() != source.dim() {
            return Err(MtemError::DimensionMismatch {
                what: "target feature dimension",
                expected: source.dim(),
                found: target.dim(),
            });
        }
    }
    Ok(())
}

fn labeled<'a>(batch: &[&'a Instance]) -> Vec<LabeledExample<'a>> {
    batch
        .iter()
        .map(|inst| LabeledExample {
            features: &inst.features,
            label: inst.label.expect("source instances are labeled"),
        })
        .collect()
}

fn ensure_finite(params: &ParameterVector) -> Result<()> {
    if params.is_finite() {
        Ok(())
    } else {
        Err(MtemError::NonFinite("model parameters"))
    }
}

/// Runs the meta-learning loop for `config.t_max` steps from `params0`.
pub fn mtem_train(
    config: &MtemConfig,
    source: &Dataset,
    target: &Dataset,
    params0: &ParameterVector,
) -> Result<TrainResult> {
    check_inputs(config, source, Some(target))?;
    let sched = config.temperature_schedule();
    let mut psi = EntropyIndexTable::new(target.len(), config.psi_init)?;
    let mut theta = params0.clone();
    let mut trace = Vec::with_capacity(config.t_max);

    let mut target_rng = RngState::for_worker(config.seed, streams::TARGET_BATCH);
    let mut source_rng = RngState::for_worker(config.seed, streams::SOURCE_BATCH);
    let mut label_rng = RngState::for_worker(config.seed, streams::PSEUDO_LABEL);
    let mut train_rng = RngState::for_worker(config.seed, streams::SOURCE_TRAIN);

    for t in 1..=config.t_max {
        let mut step = || -> Result<(ParameterVector, EntropyIndexTable, TraceRecord)> {
            let eta = config.schedules.eta(t)?;
            let beta = config.schedules.beta(t)?;
            let batch_b = sample_batch(target, config.batch_size_target, &mut target_rng)?;
            let batch_v = sample_batch(source, config.batch_size_valid, &mut source_rng)?;
            let kappa = temperature_at(&sched, t)?;

            let mut items = Vec::with_capacity(batch_b.len());
            for inst in &batch_b {
                let tempered = predict(&theta, &inst.features, kappa)?;
                items.push(TargetItem {
                    id: inst.id,
                    features: &inst.features,
                    pseudo: sample_pseudo_label(&tempered, &mut label_rng),
                });
            }
            let valid = labeled(&batch_v);

            let source_grad = if config.source_weight > 0.0 {
                let batch_s = sample_batch(source, config.batch_size_valid, &mut train_rng)?;
                let (_, mut g) = grad_theta_supervised_batch(&theta, &labeled(&batch_s))?;
                g.scale(config.source_weight);
                Some(g)
            } else {
                None
            };

            let (loss_t, _, theta_hat) =
                target_step(&theta, &items, &psi, eta, source_grad.as_ref())?;
            let (psi_next, grad_psi_sq, loss_s) = if config.update_psi {
                let (grads, loss_s) = taylor_hypergrad(
                    &theta,
                    &theta_hat,
                    &items,
                    &valid,
                    &psi,
                    eta,
                    config.eps_rule_scale,
                )?;
                let grad_psi_sq = grads.values().map(|g| g * g).sum();
                let next =
                    outer_update_psi(&psi, &grads, beta, config.psi_min_gap, config.psi_max)?;
                (next, grad_psi_sq, loss_s)
            } else {
                let loss_s = crate::model::supervised_loss(&theta_hat, &valid)?;
                (psi.clone(), 0.0, loss_s)
            };
            let (_, grad_theta, theta_next) =
                target_step(&theta, &items, &psi_next, eta, source_grad.as_ref())?;
            ensure_finite(&theta_next)?;

            let stats = psi_next.stats();
            let record = TraceRecord {
                t,
                eta,
                beta: if config.update_psi { beta } else { 0.0 },
                kappa,
                loss_t,
                loss_s,
                grad_psi_sq,
                grad_theta_sq: grad_theta.norm_sq(),
                psi_mean: stats.map(|s| s.mean),
                psi_min: stats.map(|s| s.min),
                psi_max: stats.map(|s| s.max),
            };
            Ok((theta_next, psi_next, record))
        };
        let (theta_next, psi_next, record) = step().map_err(|e| e.at_step(t))?;
        theta = theta_next;
        psi = psi_next;
        trace.push(record);
    }

    Ok(TrainResult {
        params: theta,
        psi: Some(psi),
        trace,
    })
}

/// Target-side objective of the self-training baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelfTrainMode {
    /// Cross-entropy on argmax pseudo-labels.
    GibbsGreedy,
    /// Tsallis loss at one fixed index on annealed sampled pseudo-labels.
    FixedTsallis(EntropyIndex),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfTrainOptions {
    pub mode: SelfTrainMode,
    /// Weight of the target term in `L_S + λ L_T`.
    pub lambda: f64,
}

/// Per-instance target loss of a baseline mode for a given pseudo-label.
pub fn self_train_target_loss(
    mode: SelfTrainMode,
    p: &crate::tsallis::PredictionProbs,
    pseudo: ClassIndex,
) -> Result<f64> {
    match mode {
        SelfTrainMode::GibbsGreedy => crate::tsallis::cross_entropy(p, pseudo),
        SelfTrainMode::FixedTsallis(alpha) => crate::tsallis::tsallis_loss(p, pseudo, alpha),
    }
}

/// Joint `L_S + λ L_T` self-training by plain SGD.
pub fn self_train_baseline(
    config: &MtemConfig,
    source: &Dataset,
    target: &Dataset,
    params0: &ParameterVector,
    options: SelfTrainOptions,
) -> Result<TrainResult> {
    check_inputs(config, source, Some(target))?;
    if !(options.lambda >= 0.0 && options.lambda.is_finite()) {
        return Err(MtemError::config("lambda", "must be non-negative"));
    }
    let sched = config.temperature_schedule();
    let mut theta = params0.clone();
    let mut trace = Vec::with_capacity(config.t_max);

    let mut target_rng = RngState::for_worker(config.seed, streams::TARGET_BATCH);
    let mut source_rng = RngState::for_worker(config.seed, streams::SOURCE_BATCH);
    let mut label_rng = RngState::for_worker(config.seed, streams::PSEUDO_LABEL);

    for t in 1..=config.t_max {
        let mut step = || -> Result<(ParameterVector, TraceRecord)> {
            let eta = config.schedules.eta(t)?;
            let batch_b = sample_batch(target, config.batch_size_target, &mut target_rng)?;
            let batch_v = sample_batch(source, config.batch_size_valid, &mut source_rng)?;
            let (loss_s, mut grad) = grad_theta_supervised_batch(&theta, &labeled(&batch_v))?;

            let (kappa, loss_t, grad_t) = match options.mode {
                SelfTrainMode::GibbsGreedy => {
                    let mut pseudo = Vec::with_capacity(batch_b.len());
                    for inst in &batch_b {
                        let p = predict(&theta, &inst.features, 1.0)?;
                        pseudo.push(LabeledExample {
                            features: &inst.features,
                            label: greedy_pseudo_label(&p),
                        });
                    }
                    let (l, g) = grad_theta_supervised_batch(&theta, &pseudo)?;
                    (1.0, l, g)
                }
                SelfTrainMode::FixedTsallis(alpha) => {
                    let kappa = temperature_at(&sched, t)?;
                    let mut examples = Vec::with_capacity(batch_b.len());
                    for inst in &batch_b {
                        let tempered = predict(&theta, &inst.features, kappa)?;
                        examples.push(TsallisExample {
                            features: &inst.features,
                            label: sample_pseudo_label(&tempered, &mut label_rng),
                            psi: alpha,
                        });
                    }
                    let (l, g) = grad_theta_tsallis_batch(&theta, &examples)?;
                    (kappa, l, g)
                }
            };
            grad.axpy(options.lambda, &grad_t)?;
            let theta_next = sgd_step(&theta, &grad, eta)?;
            ensure_finite(&theta_next)?;

            let fixed_psi = match options.mode {
                SelfTrainMode::GibbsGreedy => None,
                SelfTrainMode::FixedTsallis(alpha) => Some(alpha.value()),
            };
            let record = TraceRecord {
                t,
                eta,
                beta: 0.0,
                kappa,
                loss_t,
                loss_s,
                grad_psi_sq: 0.0,
                grad_theta_sq: grad_t.norm_sq(),
                psi_mean: fixed_psi,
                psi_min: fixed_psi,
                psi_max: fixed_psi,
            };
            Ok((theta_next, record))
        };
        let (theta_next, record) = step().map_err(|e| e.at_step(t))?;
        theta = theta_next;
        trace.push(record);
    }

    Ok(TrainResult {
        params: theta,
        psi: None,
        trace,
    })
}

/// Plain SGD on the source cross-entropy.
pub fn source_only_train(
    config: &MtemConfig,
    source: &Dataset,
    params0: &ParameterVector,
) -> Result<TrainResult> {
    check_inputs(config, source, None)?;
    let mut theta = params0.clone();
    let mut trace = Vec::with_capacity(config.t_max);
    let mut source_rng = RngState::for_worker(config.seed, streams::SOURCE_BATCH);

    for t in 1..=config.t_max {
        let mut step = || -> Result<(ParameterVector, TraceRecord)> {
            let eta = config.schedules.eta(t)?;
            let batch_v = sample_batch(source, config.batch_size_valid, &mut source_rng)?;
            let (loss_s, grad) = grad_theta_supervised_batch(&theta, &labeled(&batch_v))?;
            let theta_next = sgd_step(&theta, &grad, eta)?;
            ensure_finite(&theta_next)?;
            let record = TraceRecord {
                t,
                eta,
                beta: 0.0,
                kappa: 1.0,
                loss_t: 0.0,
                loss_s,
                grad_psi_sq: 0.0,
                grad_theta_sq: grad.norm_sq(),
                psi_mean: None,
                psi_min: None,
                psi_max: None,
            };
            Ok((theta_next, record))
        };
        let (theta_next, record) = step().map_err(|e| e.at_step(t))?;
        theta = theta_next;
        trace.push(record);
    }

    Ok(TrainResult {
        params: theta,
        psi: None,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Instance};
    use crate::oracle::{compare_maps, exact_hypergrad_psi_fd};
    use crate::tsallis::PredictionProbs;

    fn feats(entries: &[(u32, f64)]) -> SparseFeatures {
        SparseFeatures::new(3, entries.to_vec()).unwrap()
    }

    fn theta() -> ParameterVector {
        ParameterVector::from_flat(2, 3, vec![0.3, -0.2, 0.1, -0.1, 0.4, 0.2, 0.05, -0.05]).unwrap()
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_eta(1, 10.0).unwrap(), 1.0);
        assert!((lr_eta(100, 10.0).unwrap() - 0.1).abs() < 1e-15);
        assert!(lr_eta(0, 10.0).is_err());
        assert_eq!(lr_beta(1, 0.1, 0.1).unwrap(), 0.1);
        assert!((lr_beta(8, 0.1, 1.0).unwrap() - 0.025).abs() < 1e-12);
        assert!(lr_beta(0, 0.1, 0.1).is_err());
        for t in 1..10_000 {
            assert!(lr_eta(t, 10.0).unwrap() >= lr_eta(t + 1, 10.0).unwrap());
            assert!(lr_beta(t, 0.1, 0.1).unwrap() >= lr_beta(t + 1, 0.1, 0.1).unwrap());
        }
    }

    #[test]
    fn outer_update_examples() {
        let psi = EntropyIndexTable::new(3, 2.0).unwrap();
        let same = outer_update_psi(&psi, &BTreeMap::new(), 0.1, 0.001, 10.0).unwrap();
        assert_eq!(same, psi);
        let clamped =
            outer_update_psi(&psi, &BTreeMap::from([(1, 10.0)]), 0.1, 0.001, 10.0).unwrap();
        assert_eq!(clamped.values(), &[2.0, 1.001, 2.0]);
        let up = outer_update_psi(&psi, &BTreeMap::from([(0, -0.5)]), 0.1, 0.001, 10.0).unwrap();
        assert!((up.values()[0] - 2.05).abs() < 1e-12);
        assert!(outer_update_psi(&psi, &BTreeMap::from([(7, 1.0)]), 0.1, 0.001, 10.0).is_err());
    }

    #[test]
    fn virtual_update_examples() {
        let (x0, x1) = (feats(&[(0, 1.0)]), feats(&[(1, 0.5), (2, 1.0)]));
        let batch = [
            TargetItem { id: 0, features: &x0, pseudo: 1 },
            TargetItem { id: 1, features: &x1, pseudo: 0 },
        ];
        let psi = EntropyIndexTable::new(2, 2.5).unwrap();
        assert_eq!(inner_virtual_update(&theta(), &batch, &psi, 0.0).unwrap(), theta());

        let examples = tsallis_examples(&batch, &psi).unwrap();
        let (_, g) = grad_theta_tsallis_batch(&theta(), &examples).unwrap();
        let expected = sgd_step(&theta(), &g, 0.3).unwrap();
        let hat = inner_virtual_update(&theta(), &batch, &psi, 0.3).unwrap();
        assert_eq!(hat, expected);
        assert_eq!(actual_update_theta(&theta(), &batch, &psi, 0.3).unwrap(), hat);

        let psi2 = psi.with_value(0, 4.0).unwrap();
        let examples = tsallis_examples(&batch, &psi2).unwrap();
        let (_, g) = grad_theta_tsallis_batch(&theta(), &examples).unwrap();
        let expected = sgd_step(&theta(), &g, 0.3).unwrap();
        assert_eq!(actual_update_theta(&theta(), &batch, &psi2, 0.3).unwrap(), expected);

        let short = EntropyIndexTable::new(1, 2.0).unwrap();
        assert!(matches!(
            inner_virtual_update(&theta(), &batch, &short, 0.3),
            Err(MtemError::MissingEntropyIndex(1))
        ));
    }

    #[test]
    fn one_hot_correct_batch_does_not_move() {
        let x = feats(&[(0, 1.0)]);
        let big = ParameterVector::from_flat(2, 3, vec![500.0, 0.0, 0.0, -500.0, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        let batch = [TargetItem { id: 0, features: &x, pseudo: 0 }];
        let psi = EntropyIndexTable::new(1, 2.0).unwrap();
        assert_eq!(inner_virtual_update(&big, &batch, &psi, 0.5).unwrap(), big);
    }

    #[test]
    fn hypergrad_zero_when_validation_is_solved() {
        let (x0, xv) = (feats(&[(0, 1.0)]), feats(&[(1, 1.0)]));
        let big = ParameterVector::from_flat(2, 3, vec![0.1, 800.0, 0.0, -0.1, -800.0, 0.0, 0.0, 0.0])
            .unwrap();
        let batch = [TargetItem { id: 0, features: &x0, pseudo: 1 }];
        let valid = [LabeledExample { features: &xv, label: 0 }];
        let psi = EntropyIndexTable::new(1, 2.0).unwrap();
        let g = hypergrad_psi_taylor(&big, &batch, &valid, &psi, 0.5, 0.01).unwrap();
        assert_eq!(g, BTreeMap::from([(0, 0.0)]));
        assert!(hypergrad_psi_taylor(&big, &batch, &[], &psi, 0.5, 0.01).is_err());
        let near_one = EntropyIndexTable::new(1, 1.00005).unwrap();
        assert!(hypergrad_psi_taylor(&theta(), &batch, &valid, &near_one, 0.5, 0.01).is_err());
    }

    #[test]
    fn hypergrad_zero_for_saturated_instance() {
        let (x0, x1, xv) = (feats(&[(0, 1.0)]), feats(&[(1, 1.0)]), feats(&[(2, 1.0)]));
        let t = ParameterVector::from_flat(2, 3, vec![900.0, 0.1, 0.2, -900.0, -0.1, 0.0, 0.0, 0.0])
            .unwrap();
        let batch = [
            TargetItem { id: 0, features: &x0, pseudo: 0 },
            TargetItem { id: 1, features: &x1, pseudo: 1 },
        ];
        let valid = [LabeledExample { features: &xv, label: 1 }];
        let psi = EntropyIndexTable::new(2, 2.0).unwrap();
        let g = hypergrad_psi_taylor(&t, &batch, &valid, &psi, 0.5, 0.01).unwrap();
        assert_eq!(g[&0], 0.0);
        assert!(g[&1] != 0.0);
        assert!(!g.contains_key(&2));
    }

    #[test]
    fn hypergrad_matches_exact_oracle() {
        let xs = [feats(&[(0, 0.8), (2, -0.4)]), feats(&[(1, 1.0)])];
        let vs = [
            feats(&[(0, 1.0)]),
            feats(&[(1, 0.7), (2, 0.3)]),
            feats(&[(0, -0.5), (2, 1.0)]),
            feats(&[(1, -1.0)]),
        ];
        let batch = [
            TargetItem { id: 0, features: &xs[0], pseudo: 1 },
            TargetItem { id: 1, features: &xs[1], pseudo: 0 },
        ];
        let valid: Vec<_> = vs
            .iter()
            .zip([0, 1, 1, 0])
            .map(|(features, label)| LabeledExample { features, label })
            .collect();
        let psi = EntropyIndexTable::new(2, 2.0).unwrap().with_value(1, 3.0).unwrap();
        let taylor = hypergrad_psi_taylor(&theta(), &batch, &valid, &psi, 0.5, 0.01).unwrap();
        let exact = exact_hypergrad_psi_fd(&theta(), &batch, &valid, &psi, 0.5, 1e-4).unwrap();
        let cmp = compare_maps(&exact, &taylor).unwrap();
        assert!(cmp.cosine_similarity > 0.99, "{cmp:?}");
        for (a, b) in exact.values().zip(taylor.values()) {
            if a.abs() > 1e-8 {
                assert_eq!(a.signum(), b.signum());
            }
        }
    }

    #[test]
    fn fixed_tsallis_near_one_matches_gibbs_loss() {
        let p = PredictionProbs::new(vec![0.2, 0.5, 0.3]).unwrap();
        let alpha = EntropyIndex::new(1.0 + TAU_LIMIT).unwrap();
        for z in 0..3 {
            let a = self_train_target_loss(SelfTrainMode::FixedTsallis(alpha), &p, z).unwrap();
            let b = self_train_target_loss(SelfTrainMode::GibbsGreedy, &p, z).unwrap();
            assert_eq!(a, b);
        }
    }

    fn toy_data() -> (Dataset, Dataset) {
        let mk = |id: usize, sign: f64, label: Option<usize>, domain: &str| Instance {
            id,
            features: feats(&[(0, sign), (1, 0.3 * (id % 3) as f64 - 0.3)]),
            label,
            domain: domain.into(),
        };
        let source: Vec<_> = (0..20)
            .map(|i| {
                let c = i % 2;
                mk(i, if c == 0 { 1.0 } else { -1.0 }, Some(c), "source")
            })
            .collect();
        let target: Vec<_> = (0..12)
            .map(|i| mk(i, if i % 2 == 0 { 0.6 } else { -0.6 }, None, "target"))
            .collect();
        let names = vec!["0".to_string(), "1".to_string()];
        (
            Dataset::new(source, 3, 2, names.clone()).unwrap(),
            Dataset::new(target, 3, 2, names).unwrap(),
        )
    }

    fn small_config(t_max: usize) -> MtemConfig {
        MtemConfig {
            batch_size_target: 4,
            batch_size_valid: 4,
            t_max,
            seed: 7,
            ..MtemConfig::default()
        }
    }

    #[test]
    fn zero_steps_return_initial_state() {
        let (s, t) = toy_data();
        let r = mtem_train(&small_config(0), &s, &t, &theta()).unwrap();
        assert_eq!(r.params, theta());
        assert_eq!(r.psi.unwrap(), EntropyIndexTable::new(12, 2.0).unwrap());
        assert!(r.trace.is_empty());
        let r = source_only_train(&small_config(0), &s, &theta()).unwrap();
        assert_eq!(r.params, theta());
    }

    #[test]
    fn mtem_is_deterministic_and_bounded() {
        let (s, t) = toy_data();
        let cfg = small_config(60);
        let a = mtem_train(&cfg, &s, &t, &theta()).unwrap();
        let b = mtem_train(&cfg, &s, &t, &theta()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.len(), 60);
        for r in &a.trace {
            assert!(r.psi_min.unwrap() >= cfg.psi_lower() && r.psi_max.unwrap() <= cfg.psi_max);
        }
        let csv = a.trace_csv();
        assert!(csv.starts_with(
            "t,eta,beta,kappa,loss_t,loss_s,grad_psi_sq,grad_theta_sq,psi_mean,psi_min,psi_max\n"
        ));
        assert_eq!(csv.lines().count(), 61);
    }

    #[test]
    fn mtem_rejects_small_target() {
        let (s, t) = toy_data();
        let cfg = MtemConfig {
            batch_size_target: 13,
            ..small_config(5)
        };
        assert!(mtem_train(&cfg, &s, &t, &theta()).is_err());
    }

    #[test]
    fn self_train_with_zero_lambda_is_source_only() {
        let (s, t) = toy_data();
        let cfg = small_config(40);
        let options = SelfTrainOptions {
            mode: SelfTrainMode::GibbsGreedy,
            lambda: 0.0,
        };
        let a = self_train_baseline(&cfg, &s, &t, &theta(), options).unwrap();
        let b = source_only_train(&cfg, &s, &theta()).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn source_only_fits_separable_data() {
        let (s, _) = toy_data();
        let cfg = MtemConfig {
            t_max: 500,
            ..small_config(500)
        };
        let r = source_only_train(&cfg, &s, &ParameterVector::zeros(2, 3).unwrap()).unwrap();
        let acc = crate::data::evaluate(&r.params, &s).unwrap().accuracy;
        assert!(acc >= 0.95, "{acc}");
        let again = source_only_train(&cfg, &s, &ParameterVector::zeros(2, 3).unwrap()).unwrap();
        assert_eq!(r.trace, again.trace);
    }
}
