//! Importance-weighted risk estimators over multi-logger bandit data.
//!
//! Every estimator funnels through [`weighted_sum`], which accumulates in
//! (logger, record) order, so reductions between estimators are exact.

use serde::{Deserialize, Serialize};

use crate::bandit::MultiLoggerDataset;
use crate::error::{CoreError, Result};
use crate::policy::{Mixture, Policy};

/// Guard added to every variance before it is inverted.
pub const VARIANCE_EPS: f64 = 1e-8;
/// Tolerance on `Σ λ_j n_j = 1`.
pub const LAMBDA_TOL: f64 = 1e-9;
pub const DEFAULT_CLIP: f64 = 100.0;

const BATCH: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct RiskValue {
    pub estimate: f64,
    /// Per-logger weight each record's term was multiplied by.
    pub lambda: Vec<f64>,
    /// Unweighted per-record terms `ratio · δ`, grouped by logger.
    pub terms: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorKind {
    Naive,
    LambdaWeighted { lambda: Vec<f64> },
    WeightedStar,
    Balanced,
    Wcrm { clip: f64, lambda_reg: f64 },
}

fn check_policy(data: &MultiLoggerDataset, policy: &dyn Policy) -> Result<()> {
    if data.is_empty() {
        return Err(CoreError::arg("empty bandit dataset"));
    }
    if policy.num_features() != data.num_features() || policy.num_labels() != data.num_labels() {
        return Err(CoreError::arg(format!(
            "policy is {}→{}, data is {}→{}",
            policy.num_features(),
            policy.num_labels(),
            data.num_features(),
            data.num_labels()
        )));
    }
    Ok(())
}

/// `h(y|x)` for every record, grouped by logger.
pub fn target_propensities(data: &MultiLoggerDataset, policy: &dyn Policy) -> Result<Vec<Vec<f64>>> {
    check_policy(data, policy)?;
    Ok(data
        .groups()
        .iter()
        .map(|g| {
            let mut out = Vec::with_capacity(g.len());
            for chunk in g.chunks(BATCH) {
                let xs: Vec<&[f64]> = chunk.iter().map(|r| &*r.x).collect();
                let ys: Vec<&[u8]> = chunk.iter().map(|r| r.y.as_slice()).collect();
                out.extend(policy.propensities(&xs, &ys));
            }
            out
        })
        .collect())
}

/// `h(y|x) / h_j(y|x)` for every record, using the logged propensities.
pub fn importance_ratios(data: &MultiLoggerDataset, policy: &dyn Policy) -> Result<Vec<Vec<f64>>> {
    let target = target_propensities(data, policy)?;
    Ok(target
        .into_iter()
        .zip(data.groups())
        .map(|(t, g)| t.iter().zip(g).map(|(h, r)| h / r.propensity).collect())
        .collect())
}

pub fn losses(data: &MultiLoggerDataset) -> Vec<Vec<f64>> {
    data.groups()
        .iter()
        .map(|g| g.iter().map(|r| r.loss).collect())
        .collect()
}

pub fn ips_terms(ratios: &[Vec<f64>], losses: &[Vec<f64>]) -> Vec<Vec<f64>> {
    ratios
        .iter()
        .zip(losses)
        .map(|(r, d)| r.iter().zip(d).map(|(a, b)| a * b).collect())
        .collect()
}

/// `Σ_j λ_j Σ_i terms_ij`, inner sums first, loggers in order.
pub fn weighted_sum(terms: &[Vec<f64>], lambda: &[f64]) -> f64 {
    terms
        .iter()
        .zip(lambda)
        .map(|(t, l)| l * t.iter().sum::<f64>())
        .sum()
}

pub fn uniform_lambda(sizes: &[usize]) -> Vec<f64> {
    let n: usize = sizes.iter().sum();
    vec![1.0 / n as f64; sizes.len()]
}

pub fn validate_lambda(lambda: &[f64], sizes: &[usize]) -> Result<()> {
    if lambda.len() != sizes.len() {
        return Err(CoreError::arg(format!(
            "{} weights for {} loggers",
            lambda.len(),
            sizes.len()
        )));
    }
    if lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(CoreError::arg("logger weights must be finite and non-negative"));
    }
    let total: f64 = lambda.iter().zip(sizes).map(|(l, &n)| l * n as f64).sum();
    if (total - 1.0).abs() > LAMBDA_TOL {
        return Err(CoreError::arg(format!("Σ λ_j n_j = {total}, expected 1")));
    }
    Ok(())
}

fn risk_from_terms(terms: Vec<Vec<f64>>, lambda: Vec<f64>) -> Result<RiskValue> {
    let estimate = weighted_sum(&terms, &lambda);
    if !estimate.is_finite() {
        return Err(CoreError::arg("risk estimate is not finite"));
    }
    Ok(RiskValue {
        estimate,
        lambda,
        terms,
    })
}

/// `(1/n) Σ_j Σ_i (h / h_j) δ`
pub fn naive_ips(data: &MultiLoggerDataset, policy: &dyn Policy) -> Result<RiskValue> {
    let lambda = uniform_lambda(&data.sizes());
    lambda_weighted_ips(data, policy, &lambda)
}

/// `Σ_j λ_j Σ_i (h / h_j) δ` with `Σ_j λ_j n_j = 1`.
pub fn lambda_weighted_ips(
    data: &MultiLoggerDataset,
    policy: &dyn Policy,
    lambda: &[f64],
) -> Result<RiskValue> {
    validate_lambda(lambda, &data.sizes())?;
    let ratios = importance_ratios(data, policy)?;
    risk_from_terms(ips_terms(&ratios, &losses(data)), lambda.to_vec())
}

/// Variance-minimizing logger weights `λ*_j ∝ 1 / (σ²_j + ε)`, scaled so that
/// `Σ_j λ*_j n_j = 1`.
pub fn compute_lambda_star(variances: &[f64], sizes: &[usize]) -> Result<Vec<f64>> {
    if variances.len() != sizes.len() || sizes.is_empty() {
        return Err(CoreError::arg("one variance per logger required"));
    }
    if variances.iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(CoreError::arg(format!("invalid variances {variances:?}")));
    }
    let guarded: Vec<f64> = variances.iter().map(|v| v + VARIANCE_EPS).collect();
    let smallest = guarded.iter().copied().fold(f64::INFINITY, f64::min);
    if !smallest.is_finite() {
        return Ok(uniform_lambda(sizes));
    }
    // relative precisions, exactly 1 for the least noisy logger(s)
    let rel: Vec<f64> = guarded.iter().map(|g| smallest / g).collect();
    let total: f64 = rel.iter().zip(sizes).map(|(r, &n)| r * n as f64).sum();
    Ok(rel.iter().map(|r| r / total).collect())
}

/// Self-normalized estimate of the variance of `(h/h_j) δ` under logger `j`.
pub fn self_normalized_divergence_from(
    ratios: &[Vec<f64>],
    losses: &[Vec<f64>],
    j: usize,
) -> Result<f64> {
    let nj = ratios
        .get(j)
        .ok_or_else(|| CoreError::arg(format!("no logger {j}")))?
        .len();
    if nj < 2 {
        return Err(CoreError::arg(format!("logger {j} has {nj} records, need 2")));
    }
    let terms = ips_terms(ratios, losses);
    let n: usize = terms.iter().map(Vec::len).sum();
    let u_bar = terms.iter().map(|t| t.iter().sum::<f64>()).sum::<f64>() / n as f64;
    let s = ratios[j].iter().sum::<f64>() / nj as f64;
    if !(s > 0.0) {
        return Err(CoreError::arg(format!("logger {j} has zero total importance weight")));
    }
    let ss: f64 = terms[j].iter().map(|u| (u / s - u_bar).powi(2)).sum();
    Ok(ss / (nj - 1) as f64)
}

pub fn self_normalized_divergence(
    data: &MultiLoggerDataset,
    policy: &dyn Policy,
    j: usize,
) -> Result<f64> {
    let ratios = importance_ratios(data, policy)?;
    self_normalized_divergence_from(&ratios, &losses(data), j)
}

/// `λ*` from self-normalized variances of already computed ratios.
pub fn lambda_star_from(ratios: &[Vec<f64>], losses: &[Vec<f64>]) -> Result<Vec<f64>> {
    let vars = (0..ratios.len())
        .map(|j| self_normalized_divergence_from(ratios, losses, j))
        .collect::<Result<Vec<_>>>()?;
    let sizes: Vec<usize> = ratios.iter().map(Vec::len).collect();
    compute_lambda_star(&vars, &sizes)
}

/// `(1/n) Σ_j Σ_i (h / h_avg) δ`
pub fn balanced_ips(
    data: &MultiLoggerDataset,
    policy: &dyn Policy,
    mixture: &Mixture<'_>,
) -> Result<RiskValue> {
    let ratios = balanced_ratios(data, policy, mixture)?;
    let lambda = uniform_lambda(&data.sizes());
    risk_from_terms(ips_terms(&ratios, &losses(data)), lambda)
}

pub fn mixture_propensities(data: &MultiLoggerDataset, mixture: &Mixture<'_>) -> Vec<Vec<f64>> {
    data.groups()
        .iter()
        .map(|g| g.iter().map(|r| mixture.propensity(&r.x, &r.y)).collect())
        .collect()
}

pub fn balanced_ratios(
    data: &MultiLoggerDataset,
    policy: &dyn Policy,
    mixture: &Mixture<'_>,
) -> Result<Vec<Vec<f64>>> {
    if mixture.weights().len() != data.num_loggers() {
        return Err(CoreError::arg("mixture has a different number of loggers"));
    }
    let target = target_propensities(data, policy)?;
    let avg = mixture_propensities(data, mixture);
    Ok(target
        .iter()
        .zip(&avg)
        .map(|(t, a)| t.iter().zip(a).map(|(h, p)| h / p).collect())
        .collect())
}

/// Clipped weighted risk plus `λ_reg · √(Var̂ / n)`, where `Var̂` is the
/// unbiased sample variance of `λ_j n_j u_ij` over all records.
pub fn wcrm_from_parts(
    ratios: &[Vec<f64>],
    losses: &[Vec<f64>],
    lambda: &[f64],
    lambda_reg: f64,
    clip: f64,
) -> Result<f64> {
    let sizes: Vec<usize> = ratios.iter().map(Vec::len).collect();
    let n: usize = sizes.iter().sum();
    if n < 2 {
        return Err(CoreError::arg("variance penalty needs at least 2 records"));
    }
    if !(clip > 0.0) {
        return Err(CoreError::arg(format!("clip {clip} must be positive")));
    }
    validate_lambda(lambda, &sizes)?;
    let clipped: Vec<Vec<f64>> = ratios
        .iter()
        .map(|r| r.iter().map(|v| v.min(clip)).collect())
        .collect();
    let terms = ips_terms(&clipped, losses);
    let risk = weighted_sum(&terms, lambda);
    let scaled: Vec<f64> = terms
        .iter()
        .zip(lambda.iter().zip(&sizes))
        .flat_map(|(t, (l, &nj))| t.iter().map(move |u| l * nj as f64 * u))
        .collect();
    let mean = scaled.iter().sum::<f64>() / n as f64;
    let var = scaled.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(risk + lambda_reg * (var / n as f64).sqrt())
}

pub fn wcrm_objective(
    data: &MultiLoggerDataset,
    policy: &dyn Policy,
    lambda: &[f64],
    lambda_reg: f64,
    clip: f64,
) -> Result<f64> {
    let ratios = importance_ratios(data, policy)?;
    wcrm_from_parts(&ratios, &losses(data), lambda, lambda_reg, clip)
}

impl EstimatorKind {
    /// Evaluates the estimator; `mixture` is only consulted by `Balanced`.
    pub fn evaluate(
        &self,
        data: &MultiLoggerDataset,
        policy: &dyn Policy,
        mixture: Option<&Mixture<'_>>,
    ) -> Result<f64> {
        match self {
            EstimatorKind::Naive => Ok(naive_ips(data, policy)?.estimate),
            EstimatorKind::LambdaWeighted { lambda } => {
                Ok(lambda_weighted_ips(data, policy, lambda)?.estimate)
            }
            EstimatorKind::WeightedStar => {
                let ratios = importance_ratios(data, policy)?;
                let losses = losses(data);
                let lambda = lambda_star_from(&ratios, &losses)?;
                Ok(weighted_sum(&ips_terms(&ratios, &losses), &lambda))
            }
            EstimatorKind::Balanced => {
                let mixture =
                    mixture.ok_or_else(|| CoreError::arg("balanced estimator needs the loggers"))?;
                Ok(balanced_ips(data, policy, mixture)?.estimate)
            }
            EstimatorKind::Wcrm { clip, lambda_reg } => {
                let ratios = importance_ratios(data, policy)?;
                let losses = losses(data);
                let lambda = lambda_star_from(&ratios, &losses)?;
                wcrm_from_parts(&ratios, &losses, &lambda, *lambda_reg, *clip)
            }
        }
    }
}
