//! Factorized Bernoulli policies over binary label vectors.

use mlog_autodiff::{Network, NetworkSpec, Tensor};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::data::SupervisedDataset;
use crate::error::{CoreError, Result};

/// Per-label probability clamp applied by trained policies.
pub const DEFAULT_EPS_P: f64 = 1e-4;

/// A stochastic multi-label policy whose labels are independent given `x`.
pub trait Policy: Sync {
    fn num_features(&self) -> usize;

    fn num_labels(&self) -> usize;

    /// `P(y_l = 1 | x)` for every label.
    fn label_probs(&self, x: &[f64]) -> Vec<f64>;

    fn label_probs_batch(&self, xs: &[&[f64]]) -> Vec<Vec<f64>> {
        xs.iter().map(|x| self.label_probs(x)).collect()
    }

    fn propensity(&self, x: &[f64], y: &[u8]) -> f64 {
        bernoulli_likelihood(&self.label_probs(x), y)
    }

    fn propensities(&self, xs: &[&[f64]], ys: &[&[u8]]) -> Vec<f64> {
        self.label_probs_batch(xs)
            .iter()
            .zip(ys)
            .map(|(p, y)| bernoulli_likelihood(p, y))
            .collect()
    }

    /// Draws every label independently; the returned propensity is that of the draw.
    fn sample_action(&self, x: &[f64], rng: &mut dyn RngCore) -> (Vec<u8>, f64) {
        let probs = self.label_probs(x);
        let y = sample_bits(&probs, rng);
        let p = bernoulli_likelihood(&probs, &y);
        (y, p)
    }
}

pub fn sample_bits(probs: &[f64], rng: &mut dyn RngCore) -> Vec<u8> {
    probs
        .iter()
        .map(|&p| u8::from(rng.gen::<f64>() < p))
        .collect()
}

/// `Π_l p_l^{y_l} (1 − p_l)^{1 − y_l}`
pub fn bernoulli_likelihood(probs: &[f64], y: &[u8]) -> f64 {
    probs
        .iter()
        .zip(y)
        .map(|(&p, &b)| if b == 1 { p } else { 1.0 - p })
        .product()
}

pub(crate) fn clamp_prob(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-label logistic model `σ(α · w_lᵀ [x; 1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggingPolicy {
    num_features: usize,
    num_labels: usize,
    /// `num_labels` rows of `num_features + 1` weights, bias last.
    weights: Vec<f64>,
    alpha: f64,
    eps: f64,
}

impl LoggingPolicy {
    pub fn new(
        num_features: usize,
        num_labels: usize,
        weights: Vec<f64>,
        alpha: f64,
        eps: f64,
    ) -> Result<Self> {
        if num_features == 0 || num_labels == 0 {
            return Err(CoreError::arg("policy widths must be positive"));
        }
        if weights.len() != num_labels * (num_features + 1) {
            return Err(CoreError::arg(format!(
                "expected {} weights, got {}",
                num_labels * (num_features + 1),
                weights.len()
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(CoreError::arg(format!("alpha must be positive, got {alpha}")));
        }
        if !(0.0..0.5).contains(&eps) {
            return Err(CoreError::arg(format!("clamp {eps} outside [0, 0.5)")));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(CoreError::arg("non-finite policy weight"));
        }
        Ok(Self {
            num_features,
            num_labels,
            weights,
            alpha,
            eps,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same weights with a different multiplier.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::new(
            self.num_features,
            self.num_labels,
            self.weights.clone(),
            alpha,
            self.eps,
        )
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        Self::new(
            self.num_features,
            self.num_labels,
            self.weights.clone(),
            self.alpha,
            eps,
        )
    }

    fn logit(&self, l: usize, x: &[f64]) -> f64 {
        let w = &self.weights[l * (self.num_features + 1)..(l + 1) * (self.num_features + 1)];
        w[..self.num_features]
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + w[self.num_features]
    }
}

impl Policy for LoggingPolicy {
    fn num_features(&self) -> usize {
        self.num_features
    }

    fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn label_probs(&self, x: &[f64]) -> Vec<f64> {
        (0..self.num_labels)
            .map(|l| clamp_prob(sigmoid(self.alpha * self.logit(l, x)), self.eps))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoggerConfig {
    pub steps: usize,
    pub lr: f64,
    pub l2: f64,
    pub eps: f64,
}

impl Default for LoggerConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.1,
            l2: 1e-4,
            eps: DEFAULT_EPS_P,
        }
    }
}

/// Fits one logistic regression per label by full-batch gradient descent on the
/// first `⌈fraction · n⌉` rows, starting from zero weights. The bias is not
/// penalized. `alpha` only enters at sampling time.
pub fn train_logger(
    data: &SupervisedDataset,
    fraction: f64,
    alpha: f64,
    config: &LoggerConfig,
) -> Result<LoggingPolicy> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::arg(format!("fraction {fraction} outside (0, 1]")));
    }
    let rows = ((fraction * data.len() as f64).ceil() as usize).clamp(1, data.len());
    let (p, q) = (data.num_features(), data.num_labels());
    let mut weights = vec![0.0; q * (p + 1)];
    let mut grad = vec![0.0; p + 1];
    for l in 0..q {
        let w = &mut weights[l * (p + 1)..(l + 1) * (p + 1)];
        for _ in 0..config.steps {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for i in 0..rows {
                let x = data.features(i);
                let z = w[..p].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[p];
                let r = sigmoid(z) - f64::from(data.labels(i)[l]);
                for (g, &xv) in grad[..p].iter_mut().zip(x) {
                    *g += r * xv;
                }
                grad[p] += r;
            }
            let scale = 1.0 / rows as f64;
            for k in 0..p {
                w[k] -= config.lr * (grad[k] * scale + config.l2 * w[k]);
            }
            w[p] -= config.lr * grad[p] * scale;
        }
    }
    LoggingPolicy::new(p, q, weights, alpha, config.eps)
}

/// Generator network with a sigmoid head; outputs are clamped to `[eps, 1 − eps]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralPolicy {
    net: Network,
    eps: f64,
    tau: f64,
}

impl NeuralPolicy {
    pub fn new(
        num_features: usize,
        hidden: &[usize],
        num_labels: usize,
        seed: u64,
        eps: f64,
        tau: f64,
    ) -> Result<Self> {
        let net = Network::new(NetworkSpec::generator(num_features, hidden, num_labels, seed))?;
        Self::from_network(net, eps, tau)
    }

    pub fn from_network(net: Network, eps: f64, tau: f64) -> Result<Self> {
        if !net.spec().ends_with_sigmoid() {
            return Err(CoreError::arg("generator must end with a sigmoid"));
        }
        if !(0.0..0.5).contains(&eps) {
            return Err(CoreError::arg(format!("clamp {eps} outside [0, 0.5)")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(CoreError::arg(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self { net, eps, tau })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(CoreError::arg(format!("temperature must be positive, got {tau}")));
        }
        self.tau = tau;
        Ok(())
    }

    /// Clamped label probabilities for a `[rows, p_F]` batch, eval mode.
    pub fn probs_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.net.predict(x)?;
        let clamped: Vec<f64> = out.data().iter().map(|&p| clamp_prob(p, self.eps)).collect();
        Ok(Tensor::matrix(out.rows(), out.cols(), clamped)?)
    }
}

/// Stacks rows into a `[rows, width]` tensor.
pub(crate) fn stack_rows(xs: &[&[f64]], width: usize) -> Tensor {
    let mut data = Vec::with_capacity(xs.len() * width);
    for x in xs {
        data.extend_from_slice(x);
    }
    Tensor::matrix(xs.len(), width, data).expect("rows share the policy input width")
}

impl Policy for NeuralPolicy {
    fn num_features(&self) -> usize {
        self.net.input_dim()
    }

    fn num_labels(&self) -> usize {
        self.net.output_dim()
    }

    fn label_probs(&self, x: &[f64]) -> Vec<f64> {
        self.label_probs_batch(&[x]).pop().unwrap_or_default()
    }

    fn label_probs_batch(&self, xs: &[&[f64]]) -> Vec<Vec<f64>> {
        if xs.is_empty() {
            return Vec::new();
        }
        let out = self
            .probs_tensor(&stack_rows(xs, self.num_features()))
            .expect("input width checked by the caller");
        (0..out.rows()).map(|r| out.row_slice(r).to_vec()).collect()
    }
}

/// Data-proportional mixture `h_avg = Σ_j (n_j / n) h_j`.
pub struct Mixture<'a> {
    components: Vec<&'a dyn Policy>,
    weights: Vec<f64>,
}

impl<'a> Mixture<'a> {
    pub fn new(components: Vec<&'a dyn Policy>, sizes: &[usize]) -> Result<Self> {
        if components.is_empty() || components.len() != sizes.len() {
            return Err(CoreError::arg("one size per mixture component required"));
        }
        let n: usize = sizes.iter().sum();
        if n == 0 {
            return Err(CoreError::arg("mixture sizes sum to zero"));
        }
        let (p, q) = (components[0].num_features(), components[0].num_labels());
        if components
            .iter()
            .any(|c| c.num_features() != p || c.num_labels() != q)
        {
            return Err(CoreError::arg("mixture components disagree on widths"));
        }
        let weights = sizes.iter().map(|&s| s as f64 / n as f64).collect();
        Ok(Self {
            components,
            weights,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_labels(&self) -> usize {
        self.components[0].num_labels()
    }

    pub fn propensity(&self, x: &[f64], y: &[u8]) -> f64 {
        self.components
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w * c.propensity(x, y))
            .sum()
    }

    /// Picks a component with probability `n_j / n`, then samples it.
    /// Returns the draw and its mixture propensity.
    pub fn sample(&self, x: &[f64], rng: &mut dyn RngCore) -> (Vec<u8>, f64) {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = j;
                break;
            }
        }
        let (y, _) = self.components[pick].sample_action(x, rng);
        let p = self.propensity(x, &y);
        (y, p)
    }
}

/// Every label vector of width `q`, in binary counting order.
pub fn enumerate_labels(q: usize) -> Result<Vec<Vec<u8>>> {
    if q > 15 {
        return Err(CoreError::arg(format!(
            "refusing to enumerate 2^{q} label vectors"
        )));
    }
    Ok((0..1usize << q)
        .map(|m| (0..q).map(|l| ((m >> l) & 1) as u8).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixed(probs: &[f64]) -> LoggingPolicy {
        // one-feature policy whose bias encodes logit(p)
        let mut w = Vec::new();
        for &p in probs {
            w.push(0.0);
            w.push((p / (1.0 - p)).ln());
        }
        LoggingPolicy::new(1, probs.len(), w, 1.0, 0.0).unwrap()
    }

    #[test]
    fn uniform_policy_propensity() {
        let pol = fixed(&[0.5; 6]);
        for y in enumerate_labels(6).unwrap() {
            assert!((pol.propensity(&[0.3], &y) - 1.0 / 64.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_product() {
        assert!((bernoulli_likelihood(&[0.9, 0.2], &[1, 0]) - 0.72).abs() < 1e-15);
        let pol = fixed(&[0.9, 0.2]);
        assert!((pol.propensity(&[1.0], &[1, 0]) - 0.72).abs() < 1e-12);
    }

    #[test]
    fn propensities_sum_to_one() {
        let pol = LoggingPolicy::new(2, 3, vec![0.3, -1.0, 0.2, 2.0, 0.1, -0.4, -0.7, 0.5, 1.1], 1.5, 0.0)
            .unwrap();
        let total: f64 = enumerate_labels(3)
            .unwrap()
            .iter()
            .map(|y| pol.propensity(&[0.4, -1.2], y))
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_alpha_is_uniform() {
        let pol = LoggingPolicy::new(2, 2, vec![5.0, -3.0, 1.0, 2.0, 2.0, 7.0], 1e-12, 0.0).unwrap();
        for p in pol.label_probs(&[1.0, 4.0]) {
            assert!((p - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn alpha_moves_probabilities_away_from_half() {
        let base = LoggingPolicy::new(2, 3, vec![0.3, -1.0, 0.2, 2.0, 0.1, -0.4, -0.7, 0.5, 1.1], 0.5, 0.0)
            .unwrap();
        let x = [0.8, -0.3];
        let mut prev: Vec<f64> = base.label_probs(&x).iter().map(|p| (p - 0.5).abs()).collect();
        for alpha in [1.0, 2.0, 4.0] {
            let cur: Vec<f64> = base
                .with_alpha(alpha)
                .unwrap()
                .label_probs(&x)
                .iter()
                .map(|p| (p - 0.5).abs())
                .collect();
            for (a, b) in prev.iter().zip(&cur) {
                assert!(b >= a);
            }
            prev = cur;
        }
    }

    #[test]
    fn sampling_is_reproducible_and_consistent() {
        let pol = fixed(&[0.3, 0.8, 0.5]);
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (ya, pa) = pol.sample_action(&[0.0], &mut a);
            let (yb, pb) = pol.sample_action(&[0.0], &mut b);
            assert_eq!(ya, yb);
            assert_eq!(pa, pb);
            assert_eq!(pa, pol.propensity(&[0.0], &ya));
        }
    }

    #[test]
    fn degenerate_probabilities_sample_deterministically() {
        let pol = LoggingPolicy::new(1, 2, vec![0.0, 100.0, 0.0, -100.0], 1.0, 1e-4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ones = 0;
        for _ in 0..1000 {
            let (y, p) = pol.sample_action(&[0.0], &mut rng);
            ones += usize::from(y == [1, 0]);
            assert!(p >= 1e-8);
        }
        // only a clamp-sized fraction can deviate
        assert!(ones >= 995, "{ones}");
    }

    #[test]
    fn empirical_frequency_matches_probability() {
        let probs = [0.1, 0.5, 0.93];
        let pol = fixed(&probs);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            let (y, _) = pol.sample_action(&[0.0], &mut rng);
            for l in 0..3 {
                counts[l] += y[l] as usize;
            }
        }
        for l in 0..3 {
            let freq = counts[l] as f64 / draws as f64;
            let se = (probs[l] * (1.0 - probs[l]) / draws as f64).sqrt();
            assert!((freq - probs[l]).abs() <= 3.0 * se, "label {l}: {freq}");
        }
    }

    #[test]
    fn logger_fits_separable_toy() {
        let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 - 19.5) / 10.0]).collect();
        let ys: Vec<Vec<u8>> = xs.iter().map(|x| vec![u8::from(x[0] > 0.0)]).collect();
        let data = SupervisedDataset::from_rows("sep", &xs, &ys).unwrap();
        let pol = train_logger(&data, 1.0, 1.0, &LoggerConfig::default()).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let p = pol.label_probs(x)[0];
            assert_eq!(u8::from(p > 0.5), y[0]);
        }
    }

    #[test]
    fn constant_label_still_trains() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let ys = vec![vec![1u8, 0]; 10];
        let data = SupervisedDataset::from_rows("c", &xs, &ys).unwrap();
        let pol = train_logger(&data, 0.5, 2.0, &LoggerConfig::default()).unwrap();
        let p = pol.label_probs(&[3.0]);
        assert!(p[0] > 0.5 && p[1] < 0.5);
        assert!(pol.weights().iter().all(|w| w.is_finite()));
        assert_eq!(pol.alpha(), 2.0);
        assert!(train_logger(&data, 0.0, 1.0, &LoggerConfig::default()).is_err());
    }

    #[test]
    fn mixture_examples() {
        let a = fixed(&[0.3]);
        let b = fixed(&[0.5]);
        // h_1(y=1|x) = 0.3, h_2(y=1|x) = 0.5
        let m = Mixture::new(vec![&a, &b], &[1, 1]).unwrap();
        assert!((m.propensity(&[0.0], &[1]) - 0.4).abs() < 1e-12);

        let single = Mixture::new(vec![&a], &[7]).unwrap();
        assert_eq!(single.propensity(&[0.0], &[1]), a.propensity(&[0.0], &[1]));

        let c = fixed(&[0.2, 0.7, 0.9]);
        let d = fixed(&[0.6, 0.1, 0.5]);
        let m = Mixture::new(vec![&c, &d], &[3, 5]).unwrap();
        let total: f64 = enumerate_labels(3)
            .unwrap()
            .iter()
            .map(|y| m.propensity(&[0.0], y))
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (y, p) = m.sample(&[0.0], &mut rng);
        assert_eq!(p, m.propensity(&[0.0], &y));
    }

    #[test]
    fn neural_policy_probabilities_are_clamped() {
        let pol = NeuralPolicy::new(3, &[4], 2, 1, 0.25, 1.0).unwrap();
        for p in pol.label_probs(&[100.0, -50.0, 3.0]) {
            assert!((0.25..=0.75).contains(&p));
        }
        let batch = pol.label_probs_batch(&[&[0.1, 0.2, 0.3], &[1.0, 0.0, -1.0]]);
        assert_eq!(batch.len(), 2);
        assert_eq!(batch[0], pol.label_probs(&[0.1, 0.2, 0.3]));
        assert!(NeuralPolicy::new(3, &[4], 2, 1, 0.6, 1.0).is_err());
        assert!(NeuralPolicy::new(3, &[4], 2, 1, 0.0, 0.0).is_err());
    }

    #[test]
    fn enumeration_guard() {
        assert_eq!(enumerate_labels(3).unwrap().len(), 8);
        assert!(enumerate_labels(16).is_err());
    }
}
