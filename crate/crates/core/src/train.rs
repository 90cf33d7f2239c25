//! Outer training loops: direct and constrained importance-weighted learning,
//! the WCRM baseline, and the closed-form expected Hamming loss.

use std::fmt;
use std::str::FromStr;

use mlog_autodiff::{Adam, AdamConfig, Graph, Mode, Tensor, Var};
use rand::seq::index::sample as sample_indices;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::MultiLoggerDataset;
use crate::data::SupervisedDataset;
use crate::divergence::{
    minimize_constraint, minimize_constraint_balanced, ConstraintConfig, Discriminator, Owner,
};
use crate::error::{CoreError, Result};
use crate::estimators::{
    importance_ratios, lambda_star_from, losses, mixture_propensities, uniform_lambda,
    EstimatorKind, DEFAULT_CLIP,
};
use crate::policy::{stack_rows, Mixture, NeuralPolicy, Policy, DEFAULT_EPS_P};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Logger1,
    Logger2,
    Crf,
    Wcrm,
    Naive,
    NaiveReg,
    Weighted,
    WeightedReg,
    Balanced,
    BalancedReg,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Logger1,
        Method::Logger2,
        Method::Crf,
        Method::Wcrm,
        Method::Naive,
        Method::NaiveReg,
        Method::Weighted,
        Method::WeightedReg,
        Method::Balanced,
        Method::BalancedReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Logger1 => "logger1",
            Method::Logger2 => "logger2",
            Method::Crf => "crf",
            Method::Wcrm => "wcrm",
            Method::Naive => "naive",
            Method::NaiveReg => "naive-reg",
            Method::Weighted => "weighted",
            Method::WeightedReg => "weighted-reg",
            Method::Balanced => "balanced",
            Method::BalancedReg => "balanced-reg",
        }
    }

    /// Reference rows are supervised fits, not learned from bandit feedback.
    pub fn is_reference(self) -> bool {
        matches!(self, Method::Logger1 | Method::Logger2 | Method::Crf)
    }

    pub fn is_constrained(self) -> bool {
        matches!(self, Method::NaiveReg | Method::WeightedReg | Method::BalancedReg)
    }

    fn weighting(self) -> Option<Weighting> {
        match self {
            Method::Naive | Method::NaiveReg => Some(Weighting::Uniform),
            Method::Weighted | Method::WeightedReg | Method::Wcrm => Some(Weighting::Star),
            Method::Balanced | Method::BalancedReg => Some(Weighting::Mixture),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                CoreError::arg(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Weighting {
    Uniform,
    Star,
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WcrmConfig {
    pub lr: f64,
    /// Full-batch steps per epoch.
    pub steps_per_epoch: usize,
    pub lambda_reg: f64,
    pub clip: f64,
    pub hidden: Vec<usize>,
}

impl Default for WcrmConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            steps_per_epoch: 5,
            lambda_reg: 1.0,
            clip: DEFAULT_CLIP,
            hidden: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Learning rate of the importance-weighted risk step.
    pub lr: f64,
    /// Records drawn per logger for each risk step.
    pub batch_size: usize,
    /// Risk steps per epoch; `None` means one pass over the largest logger.
    pub steps_per_epoch: Option<usize>,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Stop after this many epochs without a better validation risk; 0 disables.
    pub patience: usize,
    /// Recompute `λ*` every this many epochs; 0 fixes it at the initial policy.
    pub lambda_every: usize,
    pub eps_p: f64,
    /// Overrides the method's default generator widths.
    pub generator_hidden: Option<Vec<usize>>,
    /// Overrides the method's default discriminator widths.
    pub discriminator_hidden: Option<Vec<usize>>,
    pub constraint: ConstraintConfig,
    pub wcrm: WcrmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-4,
            batch_size: 500,
            steps_per_epoch: None,
            validation_fraction: 0.25,
            seed: 0,
            patience: 20,
            lambda_every: 1,
            eps_p: DEFAULT_EPS_P,
            generator_hidden: None,
            discriminator_hidden: None,
            constraint: ConstraintConfig::default(),
            wcrm: WcrmConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(CoreError::Config(format!(
                "validation fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size < 2 {
            return Err(CoreError::Config("need lr > 0 and batch_size ≥ 2".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(CoreError::Config("steps_per_epoch must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.eps_p) {
            return Err(CoreError::Config(format!("eps_p {} outside [0, 0.5)", self.eps_p)));
        }
        if !(self.wcrm.lr > 0.0 && self.wcrm.clip > 0.0 && self.wcrm.lambda_reg >= 0.0) {
            return Err(CoreError::Config("wcrm needs lr > 0, clip > 0, lambda_reg ≥ 0".into()));
        }
        self.constraint
            .validate()
            .map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn generator_hidden_for(&self, method: Method) -> Vec<usize> {
        if let Some(h) = &self.generator_hidden {
            return h.clone();
        }
        match method.weighting() {
            Some(Weighting::Star) if method == Method::Wcrm => self.wcrm.hidden.clone(),
            Some(Weighting::Star) => vec![7, 7],
            _ => vec![10],
        }
    }

    pub fn discriminator_hidden_for(&self, method: Method) -> Vec<usize> {
        if let Some(h) = &self.discriminator_hidden {
            return h.clone();
        }
        match method.weighting() {
            Some(Weighting::Star) => vec![30],
            _ => vec![59],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch objective over the epoch's risk steps; absent at epoch 0.
    pub train_objective: Option<f64>,
    pub val_risk: f64,
    pub lambda: Vec<f64>,
    /// Inner minimax iterations summed over the epoch.
    pub constraint_iterations: usize,
    /// Smoothed constraint estimate after the epoch's last inner loop.
    pub constraint_estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest validation risk (epoch 0 is the initialization).
    pub policy: NeuralPolicy,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Epoch 0 holds the baseline validation risk.
    pub history: Vec<EpochRecord>,
    pub epochs_run: usize,
    /// Set when training stopped on a non-finite loss or a diverging discriminator.
    pub aborted: Option<String>,
}

/// Independent streams so that switching the constraint on or off never shifts
/// the risk minibatches.
mod stream {
    pub const GENERATOR: u64 = 1;
    pub const RISK: u64 = 2;
    pub const CONSTRAINT: u64 = 3;
    pub const DISCRIMINATOR: u64 = 4;
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn seed_for(seed: u64, stream: u64) -> u64 {
    rng_for(seed, stream).next_u64()
}

/// `E_{y∼h(·|x)} δ(y*, y)` averaged over the rows, in closed form.
pub fn evaluate_exp(policy: &dyn Policy, test: &SupervisedDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(CoreError::arg("empty test set"));
    }
    if policy.num_features() != test.num_features() || policy.num_labels() != test.num_labels() {
        return Err(CoreError::arg("policy widths disagree with the test set"));
    }
    const CHUNK: usize = 2048;
    let mut total = 0.0;
    for start in (0..test.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(test.len());
        let xs: Vec<&[f64]> = (start..end).map(|i| test.features(i)).collect();
        for (i, probs) in (start..end).zip(policy.label_probs_batch(&xs)) {
            total += probs
                .iter()
                .zip(test.labels(i))
                .map(|(&p, &y)| if y == 1 { 1.0 - p } else { p })
                .sum::<f64>();
        }
    }
    Ok(total / test.len() as f64)
}

/// `log h(y|x)` per row for factorized Bernoulli probabilities: `[B,q] → [B,1]`.
fn log_likelihood(g: &mut Graph, probs: Var, bits: &Tensor) -> Result<Var> {
    let ones = g.constant(Tensor::full(bits.rows(), bits.cols(), 1.0));
    let y = g.constant(bits.clone());
    let not_y = g.sub(ones, y)?;
    let log_p = g.log(probs);
    let neg = g.neg(probs);
    let q = g.offset(neg, 1.0);
    let log_q = g.log(q);
    let a = g.mul(y, log_p)?;
    let b = g.mul(not_y, log_q)?;
    let s = g.add(a, b)?;
    Ok(g.row_sum(s))
}

fn column(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::matrix(n, 1, values).expect("non-empty column")
}

/// Minibatch pieces for one risk step: rows, label bits and per-row weights
/// `c_j δ / denominator`, so the objective is `Σ_i w_i h(y_i|x_i)`.
struct Batch<'a> {
    xs: Vec<&'a [f64]>,
    bits: Tensor,
    weights: Tensor,
}

fn bits_of(ys: &[&[u8]], q: usize) -> Tensor {
    let data = ys.iter().flat_map(|y| y.iter().map(|&b| f64::from(b))).collect();
    Tensor::matrix(ys.len(), q, data).expect("non-empty batch")
}

/// Per-logger stratified minibatch scaled by `λ_j n_j / B_j`, an unbiased
/// estimate of `Σ_j λ_j Σ_i (h / denom) δ` for any logger sizes.
fn stratified_batch<'a>(
    data: &'a MultiLoggerDataset,
    denominators: &[Vec<f64>],
    lambda: &[f64],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Batch<'a> {
    let mut xs = Vec::new();
    let mut ys: Vec<&[u8]> = Vec::new();
    let mut weights = Vec::new();
    for (j, group) in data.groups().iter().enumerate() {
        let take = batch_size.min(group.len());
        let scale = lambda[j] * group.len() as f64 / take as f64;
        for i in sample_indices(rng, group.len(), take).into_iter() {
            let r = &group[i];
            xs.push(&*r.x);
            ys.push(r.y.as_slice());
            weights.push(scale * r.loss / denominators[j][i]);
        }
    }
    Batch {
        bits: bits_of(&ys, data.num_labels()),
        weights: column(weights),
        xs,
    }
}

/// Clamped generator probabilities in train mode for the given rows.
fn policy_probs(g: &mut Graph, policy: &mut NeuralPolicy, xs: &[&[f64]]) -> Result<(Var, mlog_autodiff::Bound)> {
    let bound = policy.network().bind(g);
    let x = g.constant(stack_rows(xs, policy.num_features()));
    let probs = policy.network_mut().forward(g, &bound, x, Mode::Train)?;
    let eps = policy.eps().max(1e-12);
    Ok((g.clamp(probs, eps, 1.0 - eps), bound))
}

/// One Adam step on `Σ_i w_i h(y_i|x_i)`; returns the objective before the step.
fn risk_step(policy: &mut NeuralPolicy, opt: &mut Adam, batch: &Batch<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let (probs, bound) = policy_probs(&mut g, policy, &batch.xs)?;
    let ll = log_likelihood(&mut g, probs, &batch.bits)?;
    let h = g.exp(ll);
    let w = g.constant(batch.weights.clone());
    let terms = g.mul(h, w)?;
    let obj = g.sum(terms);
    let value = g.value(obj).item();
    if !value.is_finite() {
        return Err(CoreError::NonFiniteLoss { epoch: 0, step: 0 });
    }
    let grads = g.backward(obj)?;
    let pg = bound.grads(policy.network(), &grads);
    opt.step(policy.network_mut().params_mut(), &pg)?;
    Ok(value)
}

/// Clipped weighted risk plus the standard-error penalty over the full data,
/// built on the tape so it can be differentiated.
fn wcrm_step(
    policy: &mut NeuralPolicy,
    opt: &mut Adam,
    data: &MultiLoggerDataset,
    lambda: &[f64],
    config: &WcrmConfig,
) -> Result<f64> {
    let n = data.len();
    let mut xs = Vec::with_capacity(n);
    let mut ys: Vec<&[u8]> = Vec::with_capacity(n);
    let mut inv_prop = Vec::with_capacity(n);
    let mut loss = Vec::with_capacity(n);
    let mut risk_w = Vec::with_capacity(n);
    let mut spread_w = Vec::with_capacity(n);
    for (j, group) in data.groups().iter().enumerate() {
        for r in group {
            xs.push(&*r.x);
            ys.push(r.y.as_slice());
            inv_prop.push(1.0 / r.propensity);
            loss.push(r.loss);
            risk_w.push(lambda[j]);
            spread_w.push(lambda[j] * group.len() as f64);
        }
    }
    let mut g = Graph::new();
    let (probs, bound) = policy_probs(&mut g, policy, &xs)?;
    let ll = log_likelihood(&mut g, probs, &bits_of(&ys, data.num_labels()))?;
    let h = g.exp(ll);
    let inv = g.constant(column(inv_prop));
    let ratio = g.mul(h, inv)?;
    let ratio = g.min_scalar(ratio, config.clip);
    let delta = g.constant(column(loss));
    let u = g.mul(ratio, delta)?;
    let rw = g.constant(column(risk_w));
    let weighted = g.mul(u, rw)?;
    let risk = g.sum(weighted);
    let sw = g.constant(column(spread_w));
    let s = g.mul(u, sw)?;
    let mean = g.mean(s);
    let ones = g.constant(Tensor::full(n, 1, 1.0));
    let mean_col = g.matmul(ones, mean)?;
    let centered = g.sub(s, mean_col)?;
    let sq = g.square(centered);
    let ss = g.sum(sq);
    // √(Var̂ / n) with Var̂ = ss / (n − 1); the tiny offset keeps the gradient finite at zero spread
    let var_over_n = g.scale(ss, 1.0 / ((n - 1) as f64 * n as f64));
    let var_over_n = g.offset(var_over_n, 1e-300);
    let se = g.sqrt(var_over_n);
    let penalty = g.scale(se, config.lambda_reg);
    let obj = g.add(risk, penalty)?;
    let value = g.value(obj).item();
    if !value.is_finite() {
        return Err(CoreError::NonFiniteLoss { epoch: 0, step: 0 });
    }
    let grads = g.backward(obj)?;
    let pg = bound.grads(policy.network(), &grads);
    opt.step(policy.network_mut().params_mut(), &pg)?;
    Ok(value)
}

enum Constraint {
    None,
    PerLogger(Vec<Discriminator>),
    Mixture(Discriminator),
}

fn is_abort(e: &CoreError) -> bool {
    matches!(
        e,
        CoreError::NonFiniteLoss { .. }
            | CoreError::DiscriminatorDiverged { .. }
            | CoreError::Autodiff(mlog_autodiff::AutodiffError::NonFiniteGradient { .. })
    )
}

fn with_position(e: CoreError, epoch: usize, step: usize) -> CoreError {
    match e {
        CoreError::NonFiniteLoss { .. } => CoreError::NonFiniteLoss { epoch, step },
        other => other,
    }
}

/// Trains `method` on bandit data. `loggers` are the logging policies in logger
/// order; they are only consulted by the balanced methods.
pub fn train(
    data: &MultiLoggerDataset,
    loggers: &[&dyn Policy],
    method: Method,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let weighting = method
        .weighting()
        .ok_or_else(|| CoreError::arg(format!("{method} is a supervised reference, not trainable")))?;
    let (train_set, val_set) = data.split_validation(config.validation_fraction, config.seed)?;
    if train_set.sizes().iter().chain(&val_set.sizes()).any(|&n| n < 2) {
        return Err(CoreError::arg(
            "every logger needs at least 2 training and 2 validation records",
        ));
    }
    let mixture = if weighting == Weighting::Mixture {
        if loggers.len() != data.num_loggers() {
            return Err(CoreError::arg("balanced methods need every logging policy"));
        }
        Some(Mixture::new(loggers.to_vec(), &data.sizes())?)
    } else {
        None
    };
    let val_kind = match (method, weighting) {
        (Method::Wcrm, _) => EstimatorKind::Wcrm {
            clip: config.wcrm.clip,
            lambda_reg: config.wcrm.lambda_reg,
        },
        (_, Weighting::Uniform) => EstimatorKind::Naive,
        (_, Weighting::Star) => EstimatorKind::WeightedStar,
        (_, Weighting::Mixture) => EstimatorKind::Balanced,
    };

    let (p, q) = (data.num_features(), data.num_labels());
    let mut policy = NeuralPolicy::new(
        p,
        &config.generator_hidden_for(method),
        q,
        seed_for(config.seed, stream::GENERATOR),
        config.eps_p,
        config.constraint.tau,
    )?;
    let denominators: Vec<Vec<f64>> = match &mixture {
        Some(m) => mixture_propensities(&train_set, m),
        None => train_set
            .groups()
            .iter()
            .map(|g| g.iter().map(|r| r.propensity).collect())
            .collect(),
    };
    let n_train = train_set.len() as f64;
    let (lr, steps) = if method == Method::Wcrm {
        (config.wcrm.lr, config.wcrm.steps_per_epoch)
    } else {
        let largest = train_set.sizes().into_iter().max().unwrap_or(1);
        let auto = largest.div_ceil(config.batch_size.min(largest));
        (config.lr, config.steps_per_epoch.unwrap_or(auto))
    };
    let mut risk_opt = Adam::new(AdamConfig::with_lr(lr), policy.network().params());
    let mut constraint_opt = Adam::new(
        AdamConfig::with_lr(config.constraint.lr_generator),
        policy.network().params(),
    );
    let disc_hidden = config.discriminator_hidden_for(method);
    let disc_seed = seed_for(config.seed, stream::DISCRIMINATOR);
    let mut constraint = match (method.is_constrained(), weighting) {
        (false, _) => Constraint::None,
        (true, Weighting::Mixture) => Constraint::Mixture(Discriminator::new(
            p,
            q,
            &disc_hidden,
            Owner::Avg,
            config.constraint.lr_discriminator,
            disc_seed,
        )?),
        (true, _) => Constraint::PerLogger(
            (0..data.num_loggers())
                .map(|j| {
                    Discriminator::new(
                        p,
                        q,
                        &disc_hidden,
                        Owner::Logger(j),
                        config.constraint.lr_discriminator,
                        disc_seed.wrapping_add(j as u64),
                    )
                })
                .collect::<Result<_>>()?,
        ),
    };
    let threshold = match weighting {
        Weighting::Mixture => config.constraint.rho / n_train,
        _ => config.constraint.rho / (n_train * n_train),
    };
    let mut risk_rng = rng_for(config.seed, stream::RISK);
    let mut constraint_rng = rng_for(config.seed, stream::CONSTRAINT);

    let baseline = val_kind.evaluate(&val_set, &policy, mixture.as_ref())?;
    let mut lambda = match weighting {
        Weighting::Star => {
            lambda_star_from(&importance_ratios(&train_set, &policy)?, &losses(&train_set))?
        }
        _ => uniform_lambda(&train_set.sizes()),
    };
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_objective: None,
        val_risk: baseline,
        lambda: lambda.clone(),
        constraint_iterations: 0,
        constraint_estimate: None,
    }];
    let mut best = (policy.clone(), 0usize, baseline);
    let mut stale = 0usize;
    let mut aborted = None;
    let mut epochs_run = 0;

    for epoch in 1..=config.epochs {
        if weighting == Weighting::Star && config.lambda_every > 0 && epoch > 1 && (epoch - 1) % config.lambda_every == 0 {
            lambda = lambda_star_from(&importance_ratios(&train_set, &policy)?, &losses(&train_set))?;
        }
        let mut objective_sum = 0.0;
        let mut inner_iterations = 0;
        let mut inner_estimate = None;
        let mut run_epoch = || -> Result<()> {
            for step in 0..steps {
                let value = if method == Method::Wcrm {
                    wcrm_step(&mut policy, &mut risk_opt, &train_set, &lambda, &config.wcrm)
                } else {
                    let batch = stratified_batch(
                        &train_set,
                        &denominators,
                        &lambda,
                        config.batch_size,
                        &mut risk_rng,
                    );
                    risk_step(&mut policy, &mut risk_opt, &batch)
                }
                .map_err(|e| with_position(e, epoch, step))?;
                objective_sum += value;
                // an unreachable budget means the inner loop can never bind
                if !threshold.is_finite() {
                    continue;
                }
                let outcome = match &mut constraint {
                    Constraint::None => continue,
                    Constraint::PerLogger(discs) => {
                        let coeffs: Vec<f64> = lambda
                            .iter()
                            .zip(train_set.sizes())
                            .map(|(l, nj)| nj as f64 * l * l)
                            .collect();
                        minimize_constraint(
                            &mut policy,
                            &mut constraint_opt,
                            discs,
                            &train_set,
                            &coeffs,
                            threshold,
                            &config.constraint,
                            &mut constraint_rng,
                        )?
                    }
                    Constraint::Mixture(disc) => minimize_constraint_balanced(
                        &mut policy,
                        &mut constraint_opt,
                        disc,
                        &train_set,
                        mixture.as_ref().expect("balanced methods carry a mixture"),
                        threshold,
                        &config.constraint,
                        &mut constraint_rng,
                    )?,
                };
                inner_iterations += outcome.iterations;
                inner_estimate = Some(outcome.estimate);
            }
            Ok(())
        };
        if let Err(e) = run_epoch() {
            if is_abort(&e) {
                aborted = Some(e.to_string());
                break;
            }
            return Err(e);
        }
        epochs_run = epoch;
        let val_risk = match val_kind.evaluate(&val_set, &policy, mixture.as_ref()) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(_) => {
                aborted = Some(CoreError::NonFiniteLoss { epoch, step: steps }.to_string());
                break;
            }
        };
        history.push(EpochRecord {
            epoch,
            train_objective: Some(objective_sum / steps as f64),
            val_risk,
            lambda: lambda.clone(),
            constraint_iterations: inner_iterations,
            constraint_estimate: inner_estimate,
        });
        if val_risk < best.2 {
            best = (policy.clone(), epoch, val_risk);
            stale = 0;
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        policy: best.0,
        best_epoch: best.1,
        best_val: best.2,
        history,
        epochs_run,
        aborted,
    })
}

/// Naive or weighted learning without the divergence constraint.
pub fn train_direct(data: &MultiLoggerDataset, method: Method, config: &TrainConfig) -> Result<TrainOutcome> {
    if !matches!(method, Method::Naive | Method::Weighted) {
        return Err(CoreError::arg(format!("{method} is not a direct method")));
    }
    train(data, &[], method, config)
}

/// Constrained learning; `loggers` are needed by `balanced-reg` only.
pub fn train_constrained(
    data: &MultiLoggerDataset,
    loggers: &[&dyn Policy],
    method: Method,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if !method.is_constrained() {
        return Err(CoreError::arg(format!("{method} is not a constrained method")));
    }
    train(data, loggers, method, config)
}

pub fn train_wcrm(data: &MultiLoggerDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train(data, &[], Method::Wcrm, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandit::generate_bandit_dataset;
    use crate::estimators::wcrm_from_parts;
    use crate::oracle::Toy;
    use crate::policy::LoggingPolicy;

    fn fast_config(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 6,
            lr: 5e-2,
            batch_size: 64,
            seed,
            patience: 0,
            generator_hidden: Some(vec![6]),
            discriminator_hidden: Some(vec![6]),
            constraint: ConstraintConfig {
                rho: 1e-3,
                max_iter: 2,
                batch_size: 32,
                lr_generator: 1e-3,
                lr_discriminator: 1e-2,
                ..ConstraintConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn toy_data(seed: u64) -> (Toy, MultiLoggerDataset) {
        let toy = Toy::random(6, 3, &[0.3, 2.0], 1.0, seed).unwrap();
        let sup = toy.supervised().unwrap();
        let loggers = toy.logger_refs();
        let data = generate_bandit_dataset(&sup, &loggers, &[40, 25], seed).unwrap();
        (toy, data)
    }

    #[test]
    fn exp_examples() {
        let rows = SupervisedDataset::from_rows("t", &[vec![1.0]], &[vec![1, 0]]).unwrap();
        let fixed = |probs: [f64; 2]| {
            let logit = |p: f64| (p / (1.0 - p)).ln();
            LoggingPolicy::new(1, 2, vec![0.0, logit(probs[0]), 0.0, logit(probs[1])], 1.0, 0.0).unwrap()
        };
        assert!((evaluate_exp(&fixed([0.8, 0.3]), &rows).unwrap() - 0.5).abs() < 1e-12);
        assert!((evaluate_exp(&fixed([0.5, 0.5]), &rows).unwrap() - 1.0).abs() < 1e-12);
        let exact = LoggingPolicy::new(1, 2, vec![0.0, 800.0, 0.0, -800.0], 1.0, 0.0).unwrap();
        assert!(evaluate_exp(&exact, &rows).unwrap() < 1e-12);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn unbounded_budget_reproduces_direct_training() {
        let (_, data) = toy_data(4);
        let mut cfg = fast_config(9);
        cfg.constraint.rho = f64::INFINITY;
        for (direct, reg) in [(Method::Naive, Method::NaiveReg), (Method::Weighted, Method::WeightedReg)] {
            let a = train_direct(&data, direct, &cfg).unwrap();
            let b = train_constrained(&data, &[], reg, &cfg).unwrap();
            assert_eq!(a, b, "{direct} vs {reg}");
        }
    }

    #[test]
    fn zero_epochs_returns_initial_policy() {
        let (toy, data) = toy_data(5);
        let mut cfg = fast_config(2);
        cfg.epochs = 0;
        let out = train_direct(&data, Method::Naive, &cfg).unwrap();
        assert_eq!(out.best_epoch, 0);
        assert_eq!(out.history.len(), 1);
        let exp = evaluate_exp(&out.policy, &toy.supervised().unwrap()).unwrap();
        assert!((0.0..=3.0).contains(&exp));
    }

    #[test]
    fn chosen_checkpoint_has_lowest_validation_risk() {
        let (toy, data) = toy_data(6);
        let loggers = toy.logger_refs();
        for method in [Method::Naive, Method::WeightedReg, Method::BalancedReg, Method::Wcrm] {
            let out = train(&data, &loggers, method, &fast_config(3)).unwrap();
            assert!(out.aborted.is_none(), "{method}: {:?}", out.aborted);
            for rec in &out.history {
                assert!(out.best_val <= rec.val_risk, "{method}");
            }
            assert_eq!(out.history[out.best_epoch].val_risk, out.best_val);
        }
    }

    #[test]
    fn training_is_reproducible() {
        let (toy, data) = toy_data(7);
        let loggers = toy.logger_refs();
        let a = train(&data, &loggers, Method::BalancedReg, &fast_config(11)).unwrap();
        let b = train(&data, &loggers, Method::BalancedReg, &fast_config(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constrained_runs_the_inner_loop() {
        let (_, data) = toy_data(8);
        let out = train_constrained(&data, &[], Method::NaiveReg, &fast_config(1)).unwrap();
        assert!(out.history[1..].iter().all(|r| r.constraint_iterations > 0));
    }

    #[test]
    fn zero_loss_everywhere_keeps_risk_at_zero() {
        let (_, data) = toy_data(9);
        let groups = data
            .groups()
            .iter()
            .map(|g| g.iter().cloned().map(|mut r| {
                r.loss = 0.0;
                r
            }).collect())
            .collect();
        let data = MultiLoggerDataset::new(data.num_features(), data.num_labels(), groups).unwrap();
        let out = train_direct(&data, Method::Naive, &fast_config(0)).unwrap();
        assert!(out.history.iter().all(|r| r.val_risk == 0.0));
    }

    #[test]
    fn exploding_step_aborts_with_partial_history() {
        let (_, data) = toy_data(10);
        let mut cfg = fast_config(0);
        cfg.lr = 1e300;
        cfg.epochs = 50;
        let out = train_direct(&data, Method::Naive, &cfg).unwrap();
        assert!(out.aborted.is_some());
        assert!(out.epochs_run < 50);
        assert!(out.best_val.is_finite());
    }

    #[test]
    fn wcrm_objective_on_tape_matches_direct_formula() {
        let (_, data) = toy_data(12);
        let mut policy = NeuralPolicy::new(6, &[], 3, 5, 0.0, 1.0).unwrap();
        let lambda = uniform_lambda(&data.sizes());
        let cfg = WcrmConfig {
            lr: 1e-12,
            clip: 3.0,
            lambda_reg: 0.7,
            ..WcrmConfig::default()
        };
        // the tape runs the network in train mode; with no hidden layer there is no batch norm
        let expected = wcrm_from_parts(
            &importance_ratios(&data, &policy).unwrap(),
            &losses(&data),
            &lambda,
            0.7,
            3.0,
        )
        .unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(1e-12), policy.network().params());
        let got = wcrm_step(&mut policy, &mut opt, &data, &lambda, &cfg).unwrap();
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn stratified_batch_is_unbiased_for_unequal_sizes() {
        let (toy, data) = toy_data(13);
        let h = &toy.target;
        let denominators: Vec<Vec<f64>> = data
            .groups()
            .iter()
            .map(|g| g.iter().map(|r| r.propensity).collect())
            .collect();
        let lambda = uniform_lambda(&data.sizes());
        let full = crate::estimators::naive_ips(&data, h).unwrap().estimate;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws = 4000;
        let mut mean = 0.0;
        for _ in 0..draws {
            let b = stratified_batch(&data, &denominators, &lambda, 8, &mut rng);
            let hs = h.propensities(&b.xs, &(0..b.xs.len()).map(|i| b.bits.row_slice(i).iter().map(|&v| v as u8).collect::<Vec<_>>()).collect::<Vec<_>>().iter().map(Vec::as_slice).collect::<Vec<_>>());
            mean += hs.iter().zip(b.weights.data()).map(|(a, w)| a * w).sum::<f64>() / draws as f64;
        }
        assert!((mean - full).abs() < 0.02 * full.max(0.1), "{mean} vs {full}");
    }
}
