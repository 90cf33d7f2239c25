//! Chi-square type f-divergence `f(t) = t² − 1`, its variational lower bound and
//! the adversarial loops that push a generator under a divergence budget.

use mlog_autodiff::{Adam, AdamConfig, AutodiffError, Graph, Mode, Network, NetworkSpec, Tensor, Var};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::bandit::MultiLoggerDataset;
use crate::error::{CoreError, Result};
use crate::policy::{enumerate_labels, stack_rows, Mixture, NeuralPolicy, Policy};

/// Largest label width the enumeration oracle accepts.
pub const MAX_ENUMERABLE_LABELS: usize = 15;

pub fn f_generator(t: f64) -> f64 {
    t * t - 1.0
}

/// `sup_t { u t − f(t) } = u²/4 + 1`
pub fn f_conjugate(u: f64) -> f64 {
    u * u / 4.0 + 1.0
}

/// `f*` applied elementwise on the tape.
pub fn f_conjugate_var(g: &mut Graph, t: Var) -> Var {
    let sq = g.square(t);
    let q = g.scale(sq, 0.25);
    g.offset(q, 1.0)
}

fn check_enumerable(h: &dyn Policy, h_ref_labels: usize, contexts: &[&[f64]]) -> Result<()> {
    if contexts.is_empty() {
        return Err(CoreError::arg("no contexts to average over"));
    }
    if h.num_labels() != h_ref_labels {
        return Err(CoreError::arg("policies disagree on the label width"));
    }
    if h_ref_labels > MAX_ENUMERABLE_LABELS {
        return Err(CoreError::arg(format!(
            "{h_ref_labels} labels is too many to enumerate (limit {MAX_ENUMERABLE_LABELS})"
        )));
    }
    Ok(())
}

/// `(1/|C|) Σ_x Σ_y h(y|x)² / h_ref(y|x)`
pub fn exact_d2_enumerate(h: &dyn Policy, h_ref: &dyn Policy, contexts: &[&[f64]]) -> Result<f64> {
    check_enumerable(h, h_ref.num_labels(), contexts)?;
    exact_d2_with(h, |x, y| h_ref.propensity(x, y), contexts)
}

pub fn exact_d2_mixture(h: &dyn Policy, mixture: &Mixture<'_>, contexts: &[&[f64]]) -> Result<f64> {
    check_enumerable(h, mixture.num_labels(), contexts)?;
    exact_d2_with(h, |x, y| mixture.propensity(x, y), contexts)
}

fn exact_d2_with(
    h: &dyn Policy,
    reference: impl Fn(&[f64], &[u8]) -> f64,
    contexts: &[&[f64]],
) -> Result<f64> {
    let labels = enumerate_labels(h.num_labels())?;
    let mut total = 0.0;
    for x in contexts {
        for y in &labels {
            let p = h.propensity(x, y);
            total += p * p / reference(x, y);
        }
    }
    Ok(total / contexts.len() as f64)
}

/// `max_{x,y} h(y|x) / h_ref(y|x)`
pub fn sup_ratio_enumerate(
    h: &dyn Policy,
    reference: impl Fn(&[f64], &[u8]) -> f64,
    contexts: &[&[f64]],
) -> Result<f64> {
    check_enumerable(h, h.num_labels(), contexts)?;
    let labels = enumerate_labels(h.num_labels())?;
    let mut best: f64 = 0.0;
    for x in contexts {
        for y in &labels {
            best = best.max(h.propensity(x, y) / reference(x, y));
        }
    }
    Ok(best)
}

/// Standard Gumbel draw `−log(−log u)`.
pub fn sample_gumbel(rng: &mut dyn RngCore) -> f64 {
    // open interval keeps both logarithms finite
    let u: f64 = loop {
        let u = rng.gen::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

/// Relaxed one-hot `softmax((log π + g) / τ)` for given noise `g`.
pub fn gumbel_softmax_with_noise(probs: &[f64], noise: &[f64], tau: f64, eps: f64) -> Result<Vec<f64>> {
    if probs.len() != noise.len() || probs.is_empty() {
        return Err(CoreError::arg("probabilities and noise must have equal, positive length"));
    }
    if !(tau > 0.0) {
        return Err(CoreError::arg(format!("temperature {tau} must be positive")));
    }
    let z: Vec<f64> = probs
        .iter()
        .zip(noise)
        .map(|(&p, &g)| (p.max(eps).ln() + g) / tau)
        .collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.iter().map(|v| v / s).collect())
}

pub fn gumbel_softmax_sample(probs: &[f64], tau: f64, eps: f64, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
    let noise: Vec<f64> = (0..probs.len()).map(|_| sample_gumbel(rng)).collect();
    gumbel_softmax_with_noise(probs, &noise, tau, eps)
}

/// Differences `g₁ − g₀` of independent Gumbel pairs, one per label.
pub fn sample_binary_noise(rows: usize, cols: usize, rng: &mut dyn RngCore) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| sample_gumbel(rng) - sample_gumbel(rng))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive batch shape")
}

/// Two-class Gumbel-softmax per label: the weight on "label on" of
/// `softmax([log p + g₁, log(1 − p) + g₀] / τ)`, i.e.
/// `σ((log p − log(1 − p) + g₁ − g₀) / τ)`. `probs` must lie in (0, 1).
pub fn relaxed_bernoulli(
    g: &mut Graph,
    probs: Var,
    noise: Var,
    tau: f64,
) -> std::result::Result<Var, AutodiffError> {
    let log_p = g.log(probs);
    let neg = g.neg(probs);
    let one_minus = g.offset(neg, 1.0);
    let log_q = g.log(one_minus);
    let logit = g.sub(log_p, log_q)?;
    let z = g.add(logit, noise)?;
    let z = g.scale(z, 1.0 / tau);
    Ok(g.sigmoid(z))
}

/// `Σ a_i T_fake,i − Σ b_i f*(T_real,i)` for column weights `a`, `b`.
pub fn weighted_variational_objective(
    g: &mut Graph,
    t_fake: Var,
    fake_weights: Var,
    t_real: Var,
    real_weights: Var,
) -> std::result::Result<Var, AutodiffError> {
    let a = g.mul(t_fake, fake_weights)?;
    let a = g.sum(a);
    let conj = f_conjugate_var(g, t_real);
    let b = g.mul(conj, real_weights)?;
    let b = g.sum(b);
    g.sub(a, b)
}

/// Minibatch `F = mean T(fake) − mean f*(T(real))`.
///
/// Real and fake pairs go through the discriminator as one batch so that its
/// batch-norm statistics are shared.
pub fn variational_objective(
    g: &mut Graph,
    disc: &mut Network,
    disc_bound: &mlog_autodiff::Bound,
    real: (Var, Var),
    fake: (Var, Var),
) -> Result<Var> {
    let b_real = g.value(real.0).rows();
    let b_fake = g.value(fake.0).rows();
    if b_real != b_fake || g.value(real.1).rows() != b_real || g.value(fake.1).rows() != b_fake {
        return Err(CoreError::arg(format!(
            "real batch of {b_real} and fake batch of {b_fake} rows"
        )));
    }
    let real_in = g.concat_cols(real.0, real.1)?;
    let fake_in = g.concat_cols(fake.0, fake.1)?;
    let both = g.concat_rows(real_in, fake_in)?;
    let t = disc.forward(g, disc_bound, both, Mode::Train)?;
    let t_real = g.slice_rows(t, 0, b_real)?;
    let t_fake = g.slice_rows(t, b_real, b_fake)?;
    let fake_mean = g.mean(t_fake);
    let conj = f_conjugate_var(g, t_real);
    let real_mean = g.mean(conj);
    Ok(g.sub(fake_mean, real_mean)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Logger(usize),
    Avg,
}

impl std::fmt::Display for Owner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Owner::Logger(j) => write!(f, "{j}"),
            Owner::Avg => write!(f, "avg"),
        }
    }
}

/// Witness network `T_w(x, y)` with its own ascent optimizer.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub net: Network,
    pub owner: Owner,
    opt: Adam,
}

impl Discriminator {
    pub fn new(
        num_features: usize,
        num_labels: usize,
        hidden: &[usize],
        owner: Owner,
        lr: f64,
        seed: u64,
    ) -> Result<Self> {
        let net = Network::new(NetworkSpec::discriminator(num_features + num_labels, hidden, seed))?;
        Self::from_network(net, owner, lr)
    }

    pub fn from_network(net: Network, owner: Owner, lr: f64) -> Result<Self> {
        if !net.spec().ends_with_linear() || net.output_dim() != 1 {
            return Err(CoreError::arg("discriminator must end in a scalar linear layer"));
        }
        let opt = Adam::new(AdamConfig::with_lr(lr), net.params());
        Ok(Self { net, owner, opt })
    }

    /// Gradient ascent: Adam on the negated gradient.
    fn ascend(&mut self, grads: Vec<Tensor>) -> Result<()> {
        let neg: Vec<Tensor> = grads
            .into_iter()
            .map(|t| {
                let data = t.data().iter().map(|v| -v).collect();
                Tensor::new(t.shape().to_vec(), data).expect("same shape")
            })
            .collect();
        self.opt.step(self.net.params_mut(), &neg)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintConfig {
    /// Divergence budget before scaling by the data size.
    pub rho: f64,
    pub tau: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    /// Discriminator updates per generator update.
    pub ascent_steps: usize,
    pub ema_decay: f64,
    /// `|F|` beyond this aborts the loop.
    pub divergence_limit: f64,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            rho: 0.1 * 12_000.0 * 12_000.0,
            tau: 1.0,
            max_iter: 5,
            batch_size: 500,
            lr_generator: 1e-4,
            lr_discriminator: 2.5e-4,
            ascent_steps: 1,
            ema_decay: 0.9,
            divergence_limit: 1e6,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(CoreError::arg(format!("rho {} must be positive", self.rho)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(CoreError::arg(format!("tau {} must be positive", self.tau)));
        }
        if self.max_iter < 1 || self.batch_size < 2 || self.ascent_steps < 1 {
            return Err(CoreError::arg(
                "need max_iter ≥ 1, batch_size ≥ 2 and ascent_steps ≥ 1",
            ));
        }
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return Err(CoreError::arg("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(CoreError::arg("ema decay must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintOutcome {
    pub iterations: usize,
    /// Smoothed weighted divergence estimate at exit.
    pub estimate: f64,
    /// Last raw minibatch estimate.
    pub last: f64,
    pub satisfied: bool,
}

fn sample_rows(n: usize, batch: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    let mut rng = rng;
    sample_indices(&mut rng, n, batch.min(n)).into_vec()
}

/// Fake pairs `(x, relaxed y)` from the generator for a batch of contexts.
fn generator_fake(
    g: &mut Graph,
    policy: &mut NeuralPolicy,
    bound: &mlog_autodiff::Bound,
    xs: &[&[f64]],
    rng: &mut dyn RngCore,
) -> Result<(Var, Var)> {
    let p = policy.num_features();
    let q = policy.num_labels();
    let (eps, tau) = (policy.eps(), policy.tau());
    let x = g.constant(stack_rows(xs, p));
    let probs = policy.network_mut().forward(g, bound, x, Mode::Train)?;
    let probs = g.clamp(probs, eps.max(1e-12), 1.0 - eps.max(1e-12));
    let noise = g.constant(sample_binary_noise(xs.len(), q, rng));
    let y = relaxed_bernoulli(g, probs, noise, tau)?;
    Ok((x, y))
}

fn bits_tensor(ys: &[&[u8]], q: usize) -> Tensor {
    let data = ys.iter().flat_map(|y| y.iter().map(|&b| f64::from(b))).collect();
    Tensor::matrix(ys.len(), q, data).expect("non-empty batch")
}

struct Smoother {
    decay: f64,
    value: Option<f64>,
}

impl Smoother {
    fn push(&mut self, raw: f64) -> f64 {
        let v = match self.value {
            None => raw,
            Some(prev) => self.decay * prev + (1.0 - self.decay) * raw,
        };
        self.value = Some(v);
        v
    }
}

fn check_divergence(owner: Owner, iteration: usize, value: f64, limit: f64) -> Result<()> {
    if !value.is_finite() || value.abs() > limit {
        return Err(CoreError::DiscriminatorDiverged {
            owner: owner.to_string(),
            iteration,
            value,
        });
    }
    Ok(())
}

/// Alternating minimax on `Σ_j c_j F(θ, w_j)`: one ascent step on every
/// discriminator and one descent step on the generator per iteration, until the
/// smoothed estimate drops to `threshold` or `max_iter` iterations have run.
#[allow(clippy::too_many_arguments)]
pub fn minimize_constraint(
    policy: &mut NeuralPolicy,
    policy_opt: &mut Adam,
    discs: &mut [Discriminator],
    data: &MultiLoggerDataset,
    coeffs: &[f64],
    threshold: f64,
    config: &ConstraintConfig,
    rng: &mut dyn RngCore,
) -> Result<ConstraintOutcome> {
    config.validate()?;
    let j_count = data.num_loggers();
    if discs.len() != j_count || coeffs.len() != j_count {
        return Err(CoreError::arg("one discriminator and coefficient per logger"));
    }
    if data.sizes().iter().any(|&n| n < 2) {
        return Err(CoreError::arg("every logger needs at least 2 records"));
    }
    let q = data.num_labels();
    let mut smooth = Smoother {
        decay: config.ema_decay,
        value: None,
    };
    let mut outcome = ConstraintOutcome {
        iterations: 0,
        estimate: f64::INFINITY,
        last: f64::INFINITY,
        satisfied: false,
    };
    while outcome.iterations < config.max_iter {
        let iteration = outcome.iterations;
        for extra in 1..config.ascent_steps {
            let _ = extra;
            adversarial_step(policy, None, discs, data, coeffs, q, config, iteration, rng)?;
        }
        let raw = adversarial_step(policy, Some(policy_opt), discs, data, coeffs, q, config, iteration, rng)?;
        outcome.iterations += 1;
        outcome.last = raw;
        outcome.estimate = smooth.push(raw);
        if outcome.estimate <= threshold {
            outcome.satisfied = true;
            break;
        }
    }
    Ok(outcome)
}

/// One joint step; the generator only moves when an optimizer is supplied.
#[allow(clippy::too_many_arguments)]
fn adversarial_step(
    policy: &mut NeuralPolicy,
    policy_opt: Option<&mut Adam>,
    discs: &mut [Discriminator],
    data: &MultiLoggerDataset,
    coeffs: &[f64],
    q: usize,
    config: &ConstraintConfig,
    iteration: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let mut g = Graph::new();
    let gen_bound = if policy_opt.is_some() {
        policy.network().bind(&mut g)
    } else {
        policy.network().bind_frozen(&mut g)
    };
    let mut total: Option<Var> = None;
    let mut values = Vec::with_capacity(discs.len());
    let mut disc_bounds = Vec::with_capacity(discs.len());
    for (j, disc) in discs.iter_mut().enumerate() {
        let group = data.group(j);
        let real_idx = sample_rows(group.len(), config.batch_size, rng);
        let fake_idx = sample_rows(group.len(), config.batch_size, rng);
        let real_x: Vec<&[f64]> = real_idx.iter().map(|&i| &*group[i].x).collect();
        let real_y: Vec<&[u8]> = real_idx.iter().map(|&i| group[i].y.as_slice()).collect();
        let fake_x: Vec<&[f64]> = fake_idx.iter().map(|&i| &*group[i].x).collect();
        let rx = g.constant(stack_rows(&real_x, data.num_features()));
        let ry = g.constant(bits_tensor(&real_y, q));
        let fake = generator_fake(&mut g, policy, &gen_bound, &fake_x, rng)?;
        let bound = disc.net.bind(&mut g);
        let f = variational_objective(&mut g, &mut disc.net, &bound, (rx, ry), fake)?;
        let fv = g.value(f).item();
        check_divergence(disc.owner, iteration, fv, config.divergence_limit)?;
        values.push(fv);
        let weighted = g.scale(f, coeffs[j]);
        total = Some(match total {
            None => weighted,
            Some(t) => g.add(t, weighted)?,
        });
        disc_bounds.push(bound);
    }
    let total = total.expect("at least one logger");
    let raw = values.iter().zip(coeffs).map(|(v, c)| c * v).sum();
    let grads = g.backward(total)?;
    if let Some(opt) = policy_opt {
        let gen_grads = gen_bound.grads(policy.network(), &grads);
        opt.step(policy.network_mut().params_mut(), &gen_grads)?;
    }
    for (disc, bound) in discs.iter_mut().zip(&disc_bounds) {
        let dg = bound.grads(&disc.net, &grads);
        disc.ascend(dg)?;
    }
    Ok(raw)
}

/// Single-discriminator variant against the data-proportional mixture: real
/// pairs reuse logged contexts but draw fresh labels from `h_avg`.
#[allow(clippy::too_many_arguments)]
pub fn minimize_constraint_balanced(
    policy: &mut NeuralPolicy,
    policy_opt: &mut Adam,
    disc: &mut Discriminator,
    data: &MultiLoggerDataset,
    mixture: &Mixture<'_>,
    threshold: f64,
    config: &ConstraintConfig,
    rng: &mut dyn RngCore,
) -> Result<ConstraintOutcome> {
    config.validate()?;
    if data.sizes().iter().any(|&n| n < 2) {
        return Err(CoreError::arg("every logger needs at least 2 records"));
    }
    if mixture.weights().len() != data.num_loggers() {
        return Err(CoreError::arg("mixture has a different number of loggers"));
    }
    let q = data.num_labels();
    let mut smooth = Smoother {
        decay: config.ema_decay,
        value: None,
    };
    let mut outcome = ConstraintOutcome {
        iterations: 0,
        estimate: f64::INFINITY,
        last: f64::INFINITY,
        satisfied: false,
    };
    while outcome.iterations < config.max_iter {
        let iteration = outcome.iterations;
        for _ in 1..config.ascent_steps {
            balanced_step(policy, None, disc, data, mixture, q, config, iteration, rng)?;
        }
        let raw = balanced_step(policy, Some(policy_opt), disc, data, mixture, q, config, iteration, rng)?;
        outcome.iterations += 1;
        outcome.last = raw;
        outcome.estimate = smooth.push(raw);
        if outcome.estimate <= threshold {
            outcome.satisfied = true;
            break;
        }
    }
    Ok(outcome)
}

#[allow(clippy::too_many_arguments)]
fn balanced_step(
    policy: &mut NeuralPolicy,
    policy_opt: Option<&mut Adam>,
    disc: &mut Discriminator,
    data: &MultiLoggerDataset,
    mixture: &Mixture<'_>,
    q: usize,
    config: &ConstraintConfig,
    iteration: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let mut real_x: Vec<&[f64]> = Vec::new();
    let mut real_y: Vec<Vec<u8>> = Vec::new();
    let mut fake_x: Vec<&[f64]> = Vec::new();
    for group in data.groups() {
        for i in sample_rows(group.len(), config.batch_size, rng) {
            let x = &*group[i].x;
            let (y, _) = mixture.sample(x, rng);
            real_x.push(x);
            real_y.push(y);
        }
        for i in sample_rows(group.len(), config.batch_size, rng) {
            fake_x.push(&*group[i].x);
        }
    }
    let mut g = Graph::new();
    let gen_bound = if policy_opt.is_some() {
        policy.network().bind(&mut g)
    } else {
        policy.network().bind_frozen(&mut g)
    };
    let ys: Vec<&[u8]> = real_y.iter().map(Vec::as_slice).collect();
    let rx = g.constant(stack_rows(&real_x, data.num_features()));
    let ry = g.constant(bits_tensor(&ys, q));
    let fake = generator_fake(&mut g, policy, &gen_bound, &fake_x, rng)?;
    let bound = disc.net.bind(&mut g);
    let f = variational_objective(&mut g, &mut disc.net, &bound, (rx, ry), fake)?;
    let fv = g.value(f).item();
    check_divergence(disc.owner, iteration, fv, config.divergence_limit)?;
    let grads = g.backward(f)?;
    if let Some(opt) = policy_opt {
        let gen_grads = gen_bound.grads(policy.network(), &grads);
        opt.step(policy.network_mut().params_mut(), &gen_grads)?;
    }
    let dg = bound.grads(&disc.net, &grads);
    disc.ascend(dg)?;
    Ok(fv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::Toy;
    use crate::policy::LoggingPolicy;
    use mlog_autodiff::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conjugate_examples() {
        assert_eq!(f_conjugate(0.0), 1.0);
        assert_eq!(f_conjugate(2.0), 2.0);
        assert_eq!(f_generator(1.0), 0.0);
    }

    #[test]
    fn d2_examples() {
        let coin = |p: f64| LoggingPolicy::new(1, 1, vec![0.0, (p / (1.0 - p)).ln()], 1.0, 0.0).unwrap();
        let (h, h_ref) = (coin(0.5), coin(0.25));
        let d2 = exact_d2_enumerate(&h, &h_ref, &[&[0.0]]).unwrap();
        assert!((d2 - 4.0 / 3.0).abs() < 1e-12);
        assert!((exact_d2_enumerate(&h, &h, &[&[0.0]]).unwrap() - 1.0).abs() < 1e-15);
        let wide = LoggingPolicy::new(1, 16, vec![0.0; 32], 1.0, 0.0).unwrap();
        assert!(exact_d2_enumerate(&wide, &wide, &[&[0.0]]).is_err());
    }

    #[test]
    fn gumbel_softmax_examples() {
        let y = gumbel_softmax_with_noise(&[0.5, 0.5], &[0.0, 0.0], 1.0, 1e-4).unwrap();
        assert_eq!(y, vec![0.5, 0.5]);
        let y = gumbel_softmax_with_noise(&[0.2, 0.5, 0.3], &[0.1, -0.4, 0.9], 1e-3, 1e-4).unwrap();
        // argmax of log π + g is the third entry
        assert!(y[2] > 1.0 - 1e-12);
        let y = gumbel_softmax_with_noise(&[0.0, 1.0], &[0.0, 0.0], 1.0, 1e-4).unwrap();
        assert!(y.iter().all(|v| v.is_finite()) && y[0] > 0.0);
        assert!(gumbel_softmax_with_noise(&[0.5], &[0.0, 1.0], 1.0, 1e-4).is_err());
    }

    #[test]
    fn binary_relaxation_matches_two_class_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probs = [0.1, 0.45, 0.8, 0.99];
        let noise = sample_binary_noise(1, 4, &mut rng);
        let mut g = Graph::new();
        let p = g.constant(Tensor::row(&probs));
        let n = g.constant(noise.clone());
        let y = relaxed_bernoulli(&mut g, p, n, 0.7).unwrap();
        for (l, &pl) in probs.iter().enumerate() {
            // the difference g₁ − g₀ stands in for the pair (g₁, g₀ = 0)
            let two = gumbel_softmax_with_noise(&[pl, 1.0 - pl], &[noise.data()[l], 0.0], 0.7, 0.0).unwrap();
            assert!((g.value(y).data()[l] - two[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn relaxed_sample_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::matrix(3, 4, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let noise = sample_binary_noise(3, 4, &mut rng);
        let report = check_gradients(
            &[logits],
            |g, v| {
                let p = g.sigmoid(v[0]);
                let n = g.constant(noise.clone());
                let y = relaxed_bernoulli(g, p, n, 0.5)?;
                let sq = g.square(y);
                Ok(g.sum(sq))
            },
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    fn linear_witness(inputs: usize, weights: &[f64], bias: f64) -> Network {
        let mut net = Network::new(NetworkSpec::discriminator(inputs, &[], 0)).unwrap();
        net.params_mut()[0] = Tensor::matrix(inputs, 1, weights.to_vec()).unwrap();
        net.params_mut()[1] = Tensor::scalar(bias);
        net
    }

    fn batch_objective(net: &mut Network, rows: usize) -> f64 {
        let mut g = Graph::new();
        let b = net.bind(&mut g);
        let x = g.constant(Tensor::full(rows, 2, 0.3));
        let y = g.constant(Tensor::full(rows, 1, 1.0));
        let f = variational_objective(&mut g, net, &b, (x, y), (x, y)).unwrap();
        g.value(f).item()
    }

    #[test]
    fn constant_witnesses() {
        let mut zero = linear_witness(3, &[0.0; 3], 0.0);
        assert_eq!(batch_objective(&mut zero, 4), -1.0);
        // T ≡ 2 is optimal when the two distributions coincide
        let mut two = linear_witness(3, &[0.0; 3], 2.0);
        assert_eq!(batch_objective(&mut two, 4), 0.0);
    }

    #[test]
    fn batch_size_mismatch_is_rejected() {
        let mut net = linear_witness(3, &[0.0; 3], 0.0);
        let mut g = Graph::new();
        let b = net.bind(&mut g);
        let (x4, y4) = (g.constant(Tensor::zeros(4, 2)), g.constant(Tensor::zeros(4, 1)));
        let (x3, y3) = (g.constant(Tensor::zeros(3, 2)), g.constant(Tensor::zeros(3, 1)));
        assert!(variational_objective(&mut g, &mut net, &b, (x4, y4), (x3, y3)).is_err());
    }

    /// Exact objective of a tabular witness over every `(x, y)` pair, with
    /// fake mass `P(x) h(y|x)` and real mass `P(x) h_ref(y|x)`.
    fn tabular_problem(toy: &Toy, h: &dyn Policy, h_ref: &dyn Policy) -> (Tensor, Tensor, Tensor) {
        let k = toy.num_contexts();
        let m = 1usize << toy.num_labels();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for x in toy.contexts() {
            for y in toy.label_space() {
                a.push(h.propensity(x, y) / k as f64);
                b.push(h_ref.propensity(x, y) / k as f64);
            }
        }
        let mut onehot = vec![0.0; k * m * k * m];
        for r in 0..k * m {
            onehot[r * k * m + r] = 1.0;
        }
        (
            Tensor::matrix(k * m, k * m, onehot).unwrap(),
            Tensor::matrix(k * m, 1, a).unwrap(),
            Tensor::matrix(k * m, 1, b).unwrap(),
        )
    }

    #[test]
    fn tabular_witness_reaches_exact_divergence() {
        let toy = Toy::random(5, 3, &[1.0], 1.0, 12).unwrap();
        let h_ref = &toy.loggers[0];
        let exact = exact_d2_enumerate(&toy.target, h_ref, &toy.contexts()).unwrap() - 1.0;
        let (inputs, a, b) = tabular_problem(&toy, &toy.target, h_ref);
        let mut net = Network::new(NetworkSpec::discriminator(inputs.cols(), &[], 1)).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.05), net.params());
        let mut value = f64::NEG_INFINITY;
        for _ in 0..3000 {
            let mut g = Graph::new();
            let bound = net.bind(&mut g);
            let x = g.constant(inputs.clone());
            let t = net.forward(&mut g, &bound, x, Mode::Train).unwrap();
            let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
            let f = weighted_variational_objective(&mut g, t, av, t, bv).unwrap();
            value = g.value(f).item();
            let neg = g.neg(f);
            let grads = g.backward(neg).unwrap();
            let step = bound.grads(&net, &grads);
            opt.step(net.params_mut(), &step).unwrap();
        }
        assert!(value <= exact + 1e-9);
        assert!((value - exact).abs() < 1e-3, "{value} vs {exact}");
    }

    /// Low temperature keeps relaxed samples close to the hard logged bits, so
    /// the witness cannot separate real from fake on softness alone.
    fn one_hot_policy(toy: &Toy, seed: u64) -> NeuralPolicy {
        NeuralPolicy::new(toy.num_contexts(), &[8], toy.num_labels(), seed, 1e-4, 0.2).unwrap()
    }

    /// Settles batch-norm running statistics on the uniform context mix so that
    /// eval-mode outputs match what training sees.
    fn settle_statistics(policy: &mut NeuralPolicy, toy: &Toy) {
        let x = stack_rows(&toy.contexts(), toy.num_contexts());
        for _ in 0..200 {
            let mut g = Graph::new();
            let b = policy.network().bind_frozen(&mut g);
            let xv = g.constant(x.clone());
            policy.network_mut().forward(&mut g, &b, xv, Mode::Train).unwrap();
        }
    }

    #[test]
    fn constraint_loop_reduces_exact_divergence() {
        let toy = Toy::random(5, 3, &[0.3], 1.0, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = toy.sample(&[400], &mut rng).unwrap();
        // start far from the logger by sharpening the output layer
        let mut policy = one_hot_policy(&toy, 5);
        for v in policy.network_mut().params_mut()[4].data_mut() {
            *v *= 6.0;
        }
        settle_statistics(&mut policy, &toy);
        let contexts = toy.contexts();
        let before = exact_d2_enumerate(&policy, &toy.loggers[0], &contexts).unwrap();
        let config = ConstraintConfig {
            max_iter: 300,
            batch_size: 64,
            lr_generator: 1e-3,
            lr_discriminator: 1e-2,
            ..ConstraintConfig::default()
        };
        let mut opt = Adam::new(AdamConfig::with_lr(config.lr_generator), policy.network().params());
        let mut discs =
            vec![Discriminator::new(5, 3, &[16], Owner::Logger(0), config.lr_discriminator, 9).unwrap()];
        let out = minimize_constraint(
            &mut policy, &mut opt, &mut discs, &data, &[1.0], f64::NEG_INFINITY, &config, &mut rng,
        )
        .unwrap();
        assert_eq!(out.iterations, 300);
        assert!(!out.satisfied);
        settle_statistics(&mut policy, &toy);
        let after = exact_d2_enumerate(&policy, &toy.loggers[0], &contexts).unwrap();
        assert!(after < before, "{before} → {after}");
    }

    #[test]
    fn infinite_threshold_applies_exactly_one_update_pair() {
        let toy = Toy::random(4, 2, &[1.0], 1.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = toy.sample(&[50], &mut rng).unwrap();
        let mut policy = one_hot_policy(&toy, 1);
        let config = ConstraintConfig {
            max_iter: 1,
            batch_size: 16,
            ..ConstraintConfig::default()
        };
        let mut opt = Adam::new(AdamConfig::with_lr(1e-3), policy.network().params());
        let mut discs = vec![Discriminator::new(4, 2, &[4], Owner::Logger(0), 1e-3, 1).unwrap()];
        let out = minimize_constraint(
            &mut policy, &mut opt, &mut discs, &data, &[1.0], f64::INFINITY, &config, &mut rng,
        )
        .unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.satisfied);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn satisfied_at_entry_exits_after_one_iteration() {
        let toy = Toy::random(4, 2, &[1.0], 1.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = toy.sample(&[50], &mut rng).unwrap();
        let mut policy = one_hot_policy(&toy, 1);
        let config = ConstraintConfig {
            max_iter: 50,
            batch_size: 16,
            ..ConstraintConfig::default()
        };
        let mut opt = Adam::new(AdamConfig::with_lr(1e-3), policy.network().params());
        let mut discs = vec![Discriminator::new(4, 2, &[4], Owner::Logger(0), 1e-3, 1).unwrap()];
        let out = minimize_constraint(
            &mut policy, &mut opt, &mut discs, &data, &[1.0], 1e3, &config, &mut rng,
        )
        .unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn diverging_discriminator_aborts() {
        let toy = Toy::random(4, 2, &[1.0], 1.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = toy.sample(&[50], &mut rng).unwrap();
        let mut policy = one_hot_policy(&toy, 1);
        let config = ConstraintConfig {
            batch_size: 16,
            divergence_limit: 1e-6,
            ..ConstraintConfig::default()
        };
        let mut opt = Adam::new(AdamConfig::with_lr(1e-3), policy.network().params());
        let mut discs = vec![Discriminator::new(4, 2, &[4], Owner::Logger(0), 1e-3, 1).unwrap()];
        let err = minimize_constraint(&mut policy, &mut opt, &mut discs, &data, &[1.0], 0.0, &config, &mut rng)
            .unwrap_err();
        assert!(matches!(err, CoreError::DiscriminatorDiverged { iteration: 0, .. }));
    }

    #[test]
    fn balanced_loop_reduces_divergence_to_mixture() {
        let toy = Toy::random(5, 3, &[0.3, 1.5], 1.0, 33).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = toy.sample(&[300, 200], &mut rng).unwrap();
        let mixture = Mixture::new(toy.logger_refs(), &data.sizes()).unwrap();
        let mut policy = one_hot_policy(&toy, 2);
        for v in policy.network_mut().params_mut()[4].data_mut() {
            *v *= 6.0;
        }
        settle_statistics(&mut policy, &toy);
        let contexts = toy.contexts();
        let before = exact_d2_mixture(&policy, &mixture, &contexts).unwrap();
        let config = ConstraintConfig {
            max_iter: 300,
            batch_size: 32,
            lr_generator: 1e-3,
            lr_discriminator: 1e-2,
            ..ConstraintConfig::default()
        };
        let mut opt = Adam::new(AdamConfig::with_lr(config.lr_generator), policy.network().params());
        let mut disc = Discriminator::new(5, 3, &[16], Owner::Avg, config.lr_discriminator, 4).unwrap();
        let out = minimize_constraint_balanced(
            &mut policy, &mut opt, &mut disc, &data, &mixture, f64::NEG_INFINITY, &config, &mut rng,
        )
        .unwrap();
        assert_eq!(out.iterations, 300);
        settle_statistics(&mut policy, &toy);
        let after = exact_d2_mixture(&policy, &mixture, &contexts).unwrap();
        assert!(after < before, "{before} → {after}");
    }

    #[test]
    fn balanced_exits_early_when_budget_is_loose() {
        let toy = Toy::random(4, 2, &[1.0], 1.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = toy.sample(&[50], &mut rng).unwrap();
        let mixture = Mixture::new(toy.logger_refs(), &data.sizes()).unwrap();
        let mut policy = one_hot_policy(&toy, 1);
        let config = ConstraintConfig {
            batch_size: 16,
            ..ConstraintConfig::default()
        };
        let mut opt = Adam::new(AdamConfig::with_lr(1e-3), policy.network().params());
        let mut disc = Discriminator::new(4, 2, &[4], Owner::Avg, 1e-3, 1).unwrap();
        let out = minimize_constraint_balanced(
            &mut policy, &mut opt, &mut disc, &data, &mixture, 1e3, &config, &mut rng,
        )
        .unwrap();
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn config_validation() {
        assert!(ConstraintConfig::default().validate().is_ok());
        for bad in [
            ConstraintConfig { rho: 0.0, ..Default::default() },
            ConstraintConfig { tau: 0.0, ..Default::default() },
            ConstraintConfig { max_iter: 0, ..Default::default() },
            ConstraintConfig { batch_size: 1, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
