//! High-probability upper bounds on the true risk of a policy, used as
//! diagnostics next to the trained estimators.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::estimators::{uniform_lambda, validate_lambda};

/// Slack allowed below 1 on a second-moment input before it is rejected.
const D2_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Naive,
    LambdaWeighted,
    Balanced,
}

/// Per-logger quantities the bound is built from.
///
/// For [`BoundKind::Balanced`] `d2` and `sup_ratio` hold a single entry each,
/// measured against the size-weighted mixture of loggers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub sizes: Vec<usize>,
    /// Only read for [`BoundKind::LambdaWeighted`].
    pub lambda: Option<Vec<f64>>,
    pub d2: Vec<f64>,
    pub sup_ratio: Vec<f64>,
    /// Set when `sup_ratio` is a maximum over observed records rather than exact.
    #[serde(default)]
    pub m_is_empirical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub kind: BoundKind,
    pub empirical_risk: f64,
    pub eta: f64,
    pub loss_bound: f64,
    pub sizes: Vec<usize>,
    pub d2: Vec<f64>,
    pub sup_ratio: Vec<f64>,
    /// Logger weights the bound was evaluated with (`1/n` for naive, empty for balanced).
    pub lambda: Vec<f64>,
    /// `2 L M log(1/η) / 3` with the kind-specific `M`.
    pub range_term: f64,
    /// `L √(2 · second-moment · log(1/η))`
    pub deviation_term: f64,
    pub bound: f64,
    pub m_is_empirical: bool,
}

fn check_positive_finite(values: &[f64], what: &str, floor: f64) -> Result<()> {
    if values.iter().any(|v| !v.is_finite() || *v < floor) {
        return Err(CoreError::arg(format!("{what} must be finite and ≥ {floor}")));
    }
    Ok(())
}

pub fn generalization_bound(
    kind: BoundKind,
    empirical_risk: f64,
    loss_bound: f64,
    eta: f64,
    inputs: &BoundInputs,
) -> Result<BoundReport> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(CoreError::arg(format!("confidence η = {eta} outside (0, 1]")));
    }
    if !(loss_bound.is_finite() && loss_bound >= 0.0) {
        return Err(CoreError::arg("loss bound must be finite and non-negative"));
    }
    if !empirical_risk.is_finite() {
        return Err(CoreError::arg("empirical risk is not finite"));
    }
    let sizes = &inputs.sizes;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(CoreError::arg("every logger needs at least one record"));
    }
    check_positive_finite(&inputs.d2, "d₂", 1.0 - D2_SLACK)?;
    check_positive_finite(&inputs.sup_ratio, "sup ratio", 0.0)?;
    let log_term = (1.0 / eta).ln();

    let (lambda, range_term, deviation_term) = match kind {
        BoundKind::Naive | BoundKind::LambdaWeighted => {
            if inputs.d2.len() != sizes.len() || inputs.sup_ratio.len() != sizes.len() {
                return Err(CoreError::arg("need one d₂ and one sup ratio per logger"));
            }
            let lambda = match kind {
                BoundKind::Naive => uniform_lambda(sizes),
                _ => {
                    let l = inputs
                        .lambda
                        .clone()
                        .ok_or_else(|| CoreError::arg("λ-weighted bound needs logger weights"))?;
                    validate_lambda(&l, sizes)?;
                    l
                }
            };
            let m_lambda = lambda
                .iter()
                .zip(&inputs.sup_ratio)
                .map(|(l, m)| l * m)
                .fold(0.0, f64::max);
            let second: f64 = sizes
                .iter()
                .zip(&lambda)
                .zip(&inputs.d2)
                .map(|((&n, l), d)| n as f64 * l * l * d)
                .sum();
            let range = 2.0 * loss_bound * m_lambda * log_term / 3.0;
            let dev = loss_bound * (2.0 * second * log_term).sqrt();
            (lambda, range, dev)
        }
        BoundKind::Balanced => {
            if inputs.d2.len() != 1 || inputs.sup_ratio.len() != 1 {
                return Err(CoreError::arg("balanced bound takes one d₂ and one sup ratio"));
            }
            let n = sizes.iter().sum::<usize>() as f64;
            let range = 2.0 * loss_bound * inputs.sup_ratio[0] * log_term / (3.0 * n);
            let dev = loss_bound * (2.0 * inputs.d2[0] * log_term / n).sqrt();
            (Vec::new(), range, dev)
        }
    };

    Ok(BoundReport {
        kind,
        empirical_risk,
        eta,
        loss_bound,
        sizes: sizes.clone(),
        d2: inputs.d2.clone(),
        sup_ratio: inputs.sup_ratio.clone(),
        lambda,
        range_term,
        deviation_term,
        bound: empirical_risk + range_term + deviation_term,
        m_is_empirical: inputs.m_is_empirical,
    })
}

/// Largest observed importance ratio per logger; a lower estimate of the true supremum.
pub fn empirical_sup_ratios(ratios: &[Vec<f64>]) -> Vec<f64> {
    ratios
        .iter()
        .map(|r| r.iter().copied().fold(0.0, f64::max))
        .collect()
}
