//! Small enumerable problems where risks, divergences and variances are exact.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bandit::{BanditRecord, MultiLoggerDataset};
use crate::data::{hamming, SupervisedDataset};
use crate::error::{CoreError, Result};
use crate::policy::{enumerate_labels, LoggingPolicy, Mixture, Policy};

/// Uniform distribution over one-hot contexts, each with a fixed true label vector.
#[derive(Debug, Clone)]
pub struct Toy {
    contexts: Vec<Vec<f64>>,
    truth: Vec<Vec<u8>>,
    labels: Vec<Vec<u8>>,
    pub loggers: Vec<LoggingPolicy>,
    pub target: LoggingPolicy,
}

/// Random per-(context, label) logits of the given scale.
pub fn random_tabular_policy(
    num_contexts: usize,
    num_labels: usize,
    scale: f64,
    rng: &mut dyn RngCore,
) -> Result<LoggingPolicy> {
    let mut w = Vec::with_capacity(num_labels * (num_contexts + 1));
    for _ in 0..num_labels {
        for _ in 0..num_contexts {
            w.push(rng.gen_range(-scale..scale));
        }
        w.push(0.0);
    }
    LoggingPolicy::new(num_contexts, num_labels, w, 1.0, 0.0)
}

impl Toy {
    /// `logger_scales[j]` sets how far logger `j`'s logits stray from zero.
    pub fn random(
        num_contexts: usize,
        num_labels: usize,
        logger_scales: &[f64],
        target_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_contexts == 0 || logger_scales.is_empty() {
            return Err(CoreError::arg("toy needs contexts and loggers"));
        }
        let labels = enumerate_labels(num_labels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let contexts = (0..num_contexts)
            .map(|c| (0..num_contexts).map(|k| f64::from(u8::from(k == c))).collect())
            .collect();
        let truth = (0..num_contexts)
            .map(|_| (0..num_labels).map(|_| rng.gen_range(0..2u8)).collect())
            .collect();
        let loggers = logger_scales
            .iter()
            .map(|&s| random_tabular_policy(num_contexts, num_labels, s, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let target = random_tabular_policy(num_contexts, num_labels, target_scale, &mut rng)?;
        Ok(Self {
            contexts,
            truth,
            labels,
            loggers,
            target,
        })
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn num_labels(&self) -> usize {
        self.truth[0].len()
    }

    pub fn contexts(&self) -> Vec<&[f64]> {
        self.contexts.iter().map(Vec::as_slice).collect()
    }

    pub fn label_space(&self) -> &[Vec<u8>] {
        &self.labels
    }

    pub fn truth(&self, c: usize) -> &[u8] {
        &self.truth[c]
    }

    pub fn loss(&self, c: usize, y: &[u8]) -> f64 {
        hamming(y, &self.truth[c]) as f64
    }

    pub fn logger_refs(&self) -> Vec<&dyn Policy> {
        self.loggers.iter().map(|l| l as &dyn Policy).collect()
    }

    /// One row per context, labelled with its true label vector.
    pub fn supervised(&self) -> Result<SupervisedDataset> {
        SupervisedDataset::from_rows("toy", &self.contexts, &self.truth)
    }

    /// `E_x E_{y∼h} δ(y, y*(x))`
    pub fn true_risk(&self, h: &dyn Policy) -> f64 {
        let mut total = 0.0;
        for (c, x) in self.contexts.iter().enumerate() {
            for y in &self.labels {
                total += h.propensity(x, y) * self.loss(c, y);
            }
        }
        total / self.num_contexts() as f64
    }

    /// `E_x E_{y∼h_ref} [(h/h_ref)² δ²] − R(h)²`, the variance of one IPS term.
    pub fn ips_variance(&self, h: &dyn Policy, h_ref: &dyn Policy) -> f64 {
        let mut second = 0.0;
        for (c, x) in self.contexts.iter().enumerate() {
            for y in &self.labels {
                let (p, q) = (h.propensity(x, y), h_ref.propensity(x, y));
                second += p * p / q * self.loss(c, y).powi(2);
            }
        }
        let r = self.true_risk(h);
        second / self.num_contexts() as f64 - r * r
    }

    /// `E_x E_{y∼h_avg} [(h/h_avg)² δ²] − R(h)²`
    pub fn balanced_variance(&self, h: &dyn Policy, mixture: &Mixture<'_>) -> f64 {
        let mut second = 0.0;
        for (c, x) in self.contexts.iter().enumerate() {
            for y in &self.labels {
                let (p, q) = (h.propensity(x, y), mixture.propensity(x, y));
                second += p * p / q * self.loss(c, y).powi(2);
            }
        }
        let r = self.true_risk(h);
        second / self.num_contexts() as f64 - r * r
    }

    /// Draws `sizes[j]` records from logger `j` with uniformly drawn contexts.
    pub fn sample(&self, sizes: &[usize], rng: &mut dyn RngCore) -> Result<MultiLoggerDataset> {
        if sizes.len() != self.loggers.len() {
            return Err(CoreError::arg("one size per logger required"));
        }
        let shared: Vec<Arc<[f64]>> = self.contexts.iter().map(|x| Arc::from(x.as_slice())).collect();
        let mut groups = Vec::with_capacity(sizes.len());
        for (j, (logger, &n)) in self.loggers.iter().zip(sizes).enumerate() {
            let mut g = Vec::with_capacity(n);
            for _ in 0..n {
                let c = rng.gen_range(0..self.num_contexts());
                let (y, propensity) = logger.sample_action(&self.contexts[c], rng);
                g.push(BanditRecord {
                    logger: j,
                    x: Arc::clone(&shared[c]),
                    loss: self.loss(c, &y),
                    y,
                    propensity,
                });
            }
            groups.push(g);
        }
        MultiLoggerDataset::new(self.num_contexts(), self.num_labels(), groups)
    }
}
