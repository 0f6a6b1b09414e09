//! Brute-force finite-difference oracles.
//!
//! These deliberately avoid every closed form they are used to check.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MtemError, Result};
use crate::meta::{inner_virtual_update, EntropyIndexTable, TargetItem, DEFAULT_PSI_MIN_GAP};
use crate::model::{supervised_loss, LabeledExample, ParameterGradient, ParameterVector};

/// Default step for scalar and `ψ` differences.
pub const H_SCALAR: f64 = 1e-4;
/// Default step for `θ` coordinates.
pub const H_THETA: f64 = 1e-5;
/// Coordinates this small are left out of relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradComparison {
    pub cosine_similarity: f64,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(MtemError::domain(format!("step size must be positive, got {h}")));
    }
    Ok(())
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(MtemError::NonFinite("oracle evaluation"))
    }
}

/// Central difference `[f(x0 + h) - f(x0 - h)] / 2h`.
pub fn fd_scalar(f: impl Fn(f64) -> Result<f64>, x0: f64, h: f64) -> Result<f64> {
    check_step(h)?;
    let up = finite(f(x0 + h)?)?;
    let down = finite(f(x0 - h)?)?;
    Ok((up - down) / (2.0 * h))
}

/// Central differences over every coordinate of the flat parameter view.
pub fn fd_grad_theta(
    loss: impl Fn(&ParameterVector) -> Result<f64>,
    theta: &ParameterVector,
    h: f64,
) -> Result<ParameterGradient> {
    check_step(h)?;
    let base = theta.as_slice();
    let mut grad = Vec::with_capacity(base.len());
    for (i, &v) in base.iter().enumerate() {
        let up = finite(loss(&theta.with_coordinate(i, v + h))?)?;
        let down = finite(loss(&theta.with_coordinate(i, v - h))?)?;
        grad.push((up - down) / (2.0 * h));
    }
    ParameterVector::from_flat(theta.num_classes(), theta.dim(), grad)
}

/// Exact `∂L_S(θ̂(ψ) | V)/∂ψ_i` by perturbing each `ψ_i` through the
/// virtual update. Pseudo-labels and `θ` stay fixed.
pub fn exact_hypergrad_psi_fd(
    theta: &ParameterVector,
    batch: &[TargetItem<'_>],
    valid: &[LabeledExample<'_>],
    psi: &EntropyIndexTable,
    eta: f64,
    h: f64,
) -> Result<BTreeMap<usize, f64>> {
    check_step(h)?;
    let mut out = BTreeMap::new();
    for item in batch {
        if out.contains_key(&item.id) {
            continue;
        }
        let centre = psi.get(item.id)?.value();
        if centre - h <= 1.0 + DEFAULT_PSI_MIN_GAP {
            return Err(MtemError::domain(format!(
                "ψ perturbation {centre} - {h} leaves the valid region for instance {}",
                item.id
            )));
        }
        let at = |value: f64| -> Result<f64> {
            let shifted = psi.with_value(item.id, value)?;
            let theta_hat = inner_virtual_update(theta, batch, &shifted, eta)?;
            supervised_loss(&theta_hat, valid)
        };
        out.insert(item.id, fd_scalar(at, centre, h)?);
    }
    Ok(out)
}

/// Cosine, max relative and max absolute error of `b` against reference `a`.
pub fn compare(a: &[f64], b: &[f64]) -> Result<GradComparison> {
    if a.len() != b.len() {
        return Err(MtemError::DimensionMismatch {
            what: "compared gradient length",
            expected: a.len(),
            found: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cosine_similarity = if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    };
    let mut max_relative_error = 0.0f64;
    let mut max_absolute_error = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let abs = (x - y).abs();
        max_absolute_error = max_absolute_error.max(abs);
        if x.abs() > REL_ERROR_FLOOR {
            max_relative_error = max_relative_error.max(abs / x.abs());
        }
    }
    Ok(GradComparison {
        cosine_similarity,
        max_relative_error,
        max_absolute_error,
    })
}

/// [`compare`] over two id-keyed maps, which must share their key set.
pub fn compare_maps(a: &BTreeMap<usize, f64>, b: &BTreeMap<usize, f64>) -> Result<GradComparison> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(MtemError::domain("compared maps have different instance ids"));
    }
    let av: Vec<f64> = a.values().copied().collect();
    let bv: Vec<f64> = b.values().copied().collect();
    compare(&av, &bv)
}
