//! Experiment grids over datasets, methods and seeds, with CSV and JSON reports.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::{generate_bandit_dataset, MultiLoggerDataset};
use crate::bounds::{generalization_bound, BoundInputs, BoundKind, BoundReport};
use crate::data::{
    parse_multilabel_libsvm, parse_multilabel_libsvm_with, read_sparse_libsvm, Dims,
    SupervisedDataset, TruncatedSvd, SVD_SEED,
};
use crate::error::{CoreError, Result};
use crate::estimators::{
    balanced_ratios, importance_ratios, ips_terms, lambda_star_from, losses, uniform_lambda,
    weighted_sum,
};
use crate::policy::{train_logger, LoggerConfig, LoggingPolicy, Mixture, Policy};
use crate::train::{evaluate_exp, train, Method, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteKind {
    Table2,
    SweepReplay,
    SweepTemperature,
}

impl std::str::FromStr for SuiteKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table2" => Ok(SuiteKind::Table2),
            "sweep-replay" => Ok(SuiteKind::SweepReplay),
            "sweep-temperature" => Ok(SuiteKind::SweepTemperature),
            other => Err(CoreError::arg(format!(
                "unknown suite {other:?}; expected table2, sweep-replay or sweep-temperature"
            ))),
        }
    }
}

/// A dataset by name (files looked up in the data directory) or with explicit paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "DatasetEntry")]
pub struct DatasetSpec {
    pub name: String,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Project features onto this many singular directions of the training set.
    pub svd_rank: Option<usize>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DatasetEntry {
    Name(String),
    Full {
        name: String,
        train: Option<PathBuf>,
        test: Option<PathBuf>,
        svd_rank: Option<usize>,
    },
}

impl From<DatasetEntry> for DatasetSpec {
    fn from(e: DatasetEntry) -> Self {
        match e {
            DatasetEntry::Name(name) => DatasetSpec::named(&name),
            DatasetEntry::Full {
                name,
                train,
                test,
                svd_rank,
            } => DatasetSpec {
                name,
                train,
                test,
                svd_rank,
            },
        }
    }
}

impl DatasetSpec {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            train: None,
            test: None,
            svd_rank: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoggerSetup {
    /// Logit multiplier per logger; its length fixes the number of loggers.
    pub alphas: Vec<f64>,
    /// Leading share of the training rows the loggers are fitted on.
    pub fraction: f64,
    /// Passes over the training rows per logger.
    pub replay: Vec<usize>,
    pub crf_alpha: f64,
    pub training: LoggerConfig,
}

impl Default for LoggerSetup {
    fn default() -> Self {
        Self {
            alphas: vec![0.05, 2.0],
            fraction: 0.2,
            replay: vec![4, 4],
            crf_alpha: 1.0,
            training: LoggerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub suite: SuiteKind,
    pub data_dir: PathBuf,
    pub datasets: Vec<DatasetSpec>,
    pub seeds: Vec<u64>,
    /// Defaults depend on the suite.
    pub methods: Option<Vec<Method>>,
    pub loggers: LoggerSetup,
    /// Replay counts of the first logger in the replay sweep.
    pub replay_sweep: Vec<usize>,
    pub temperatures: Vec<f64>,
    /// Confidence of the attached generalization bounds.
    pub eta: f64,
    /// Writes 0 into `wallclock_s` when off, making reports byte-reproducible.
    pub record_timing: bool,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            suite: SuiteKind::Table2,
            data_dir: PathBuf::from("data"),
            datasets: vec![DatasetSpec::named("scene"), DatasetSpec::named("yeast")],
            seeds: (0..5).collect(),
            methods: None,
            loggers: LoggerSetup::default(),
            replay_sweep: vec![1, 2, 4, 8, 16],
            temperatures: (1..=10).map(|k| 0.5 * k as f64).collect(),
            eta: 0.1,
            record_timing: true,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CoreError::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let l = &self.loggers;
        if l.alphas.is_empty() || l.alphas.len() != l.replay.len() {
            return Err(CoreError::Config("one replay count per logger alpha".into()));
        }
        if l.alphas.iter().chain([&l.crf_alpha]).any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(CoreError::Config("logger alphas must be positive".into()));
        }
        if l.replay.iter().chain(&self.replay_sweep).any(|&r| r == 0) {
            return Err(CoreError::Config("replay counts must be at least 1".into()));
        }
        if !(l.fraction > 0.0 && l.fraction <= 1.0) {
            return Err(CoreError::Config("logger fraction outside (0, 1]".into()));
        }
        if self.temperatures.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(CoreError::Config("temperatures must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(CoreError::Config(format!("eta {} outside (0, 1]", self.eta)));
        }
        if self.seeds.is_empty() || self.datasets.is_empty() {
            return Err(CoreError::Config("need at least one seed and one dataset".into()));
        }
        for m in self.methods() {
            let needed = match m {
                Method::Logger2 => 2,
                _ => 1,
            };
            if l.alphas.len() < needed {
                return Err(CoreError::Config(format!("{m} needs {needed} loggers")));
            }
        }
        if self.suite == SuiteKind::SweepReplay && l.replay.len() < 2 {
            return Err(CoreError::Config("the replay sweep needs two loggers".into()));
        }
        Ok(())
    }

    pub fn methods(&self) -> Vec<Method> {
        if let Some(m) = &self.methods {
            return m.clone();
        }
        match self.suite {
            SuiteKind::Table2 => vec![
                Method::Logger1,
                Method::Logger2,
                Method::Wcrm,
                Method::Naive,
                Method::NaiveReg,
                Method::Weighted,
                Method::WeightedReg,
                Method::Crf,
            ],
            SuiteKind::SweepReplay => vec![Method::NaiveReg, Method::WeightedReg],
            SuiteKind::SweepTemperature => vec![Method::Wcrm, Method::NaiveReg, Method::WeightedReg],
        }
    }
}

/// One CSV line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub method: Method,
    pub seed: u64,
    pub replay_h1: usize,
    pub replay_h2: usize,
    pub tau: f64,
    pub rho: f64,
    pub exp_loss: f64,
    /// Validation risk of the selected checkpoint; empty for supervised references.
    pub val_loss: Option<f64>,
    pub epochs: usize,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub row: ReportRow,
    pub bound: Option<BoundReport>,
    pub best_epoch: Option<usize>,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub suite: SuiteKind,
    pub config: ExperimentConfig,
    pub runs: Vec<RunRecord>,
}

pub const CSV_HEADER: &str =
    "dataset,method,seed,replay_h1,replay_h2,tau,rho,exp_loss,val_loss,epochs,wallclock_s";

impl ExperimentReport {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.runs {
            w.serialize(&r.row).map_err(|e| CoreError::Serde(e.to_string()))?;
        }
        if self.runs.is_empty() {
            return Ok(format!("{CSV_HEADER}\n"));
        }
        let bytes = w.into_inner().map_err(|e| CoreError::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| CoreError::Serde(e.to_string()))
    }

    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| CoreError::Serde(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CoreError::Serde(e.to_string()))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn write(&self, stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let stem = stem.as_ref();
        let csv_path = stem.with_extension("csv");
        let json_path = stem.with_extension("json");
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        }
        fs::write(&csv_path, self.to_csv_string()?).map_err(|e| CoreError::io(&csv_path, e))?;
        fs::write(&json_path, self.to_json_string()?).map_err(|e| CoreError::io(&json_path, e))?;
        Ok((csv_path, json_path))
    }

    /// Medians over seeds for every (dataset, method, replay, τ) group, in
    /// order of first appearance.
    pub fn summarize(&self) -> Vec<SummaryRow> {
        let mut order: Vec<SummaryKey> = Vec::new();
        let mut groups: HashMap<SummaryKey, Vec<f64>> = HashMap::new();
        for r in &self.runs {
            let key = SummaryKey::of(&r.row);
            groups
                .entry(key.clone())
                .or_insert_with(|| {
                    order.push(key);
                    Vec::new()
                })
                .push(r.row.exp_loss);
        }
        order
            .into_iter()
            .map(|k| {
                let v = &groups[&k];
                SummaryRow {
                    dataset: k.dataset.clone(),
                    method: k.method,
                    replay_h1: k.replay_h1,
                    replay_h2: k.replay_h2,
                    tau: f64::from_bits(k.tau_bits),
                    median_exp: median(v),
                    seeds: v.len(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct SummaryKey {
    dataset: String,
    method: Method,
    replay_h1: usize,
    replay_h2: usize,
    tau_bits: u64,
}

impl SummaryKey {
    fn of(r: &ReportRow) -> Self {
        Self {
            dataset: r.dataset.clone(),
            method: r.method,
            replay_h1: r.replay_h1,
            replay_h2: r.replay_h2,
            tau_bits: r.tau.to_bits(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub method: Method,
    pub replay_h1: usize,
    pub replay_h2: usize,
    pub tau: f64,
    pub median_exp: f64,
    pub seeds: usize,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Looks for `<name>_<split>` and `<name>_<split>.svm` in `dir`.
pub fn locate_split(dir: &Path, spec: &DatasetSpec, split: &str) -> Result<PathBuf> {
    let explicit = match split {
        "train" => &spec.train,
        _ => &spec.test,
    };
    if let Some(p) = explicit {
        return if p.exists() {
            Ok(p.clone())
        } else {
            Err(CoreError::MissingDataset(p.clone()))
        };
    }
    let base = format!("{}_{split}", spec.name);
    let candidates = [dir.join(&base), dir.join(format!("{base}.svm"))];
    candidates
        .iter()
        .find(|p| p.is_file())
        .cloned()
        .ok_or_else(|| CoreError::MissingDataset(candidates[1].clone()))
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub name: String,
    pub train: SupervisedDataset,
    pub test: SupervisedDataset,
}

/// Reads both splits, sizing the test split by the training file; with
/// `svd_rank` the projection is fitted on the training split only.
pub fn load_dataset(dir: &Path, spec: &DatasetSpec) -> Result<LoadedDataset> {
    let train_path = locate_split(dir, spec, "train")?;
    let test_path = locate_split(dir, spec, "test")?;
    let (train, test) = match spec.svd_rank {
        None => {
            let train = parse_multilabel_libsvm(&train_path)?;
            let dims = Dims {
                num_features: Some(train.num_features()),
                num_labels: Some(train.num_labels()),
            };
            let test = parse_multilabel_libsvm_with(&test_path, dims)?;
            (train, test)
        }
        Some(k) => {
            let train = read_sparse_libsvm(&train_path, Dims::default())?;
            let dims = Dims {
                num_features: Some(train.num_features),
                num_labels: Some(train.num_labels),
            };
            let test = read_sparse_libsvm(&test_path, dims)?;
            let svd = TruncatedSvd::fit_sparse(&train, k, SVD_SEED)?;
            (svd.transform_sparse(&train)?, svd.transform_sparse(&test)?)
        }
    };
    Ok(LoadedDataset {
        name: spec.name.clone(),
        train,
        test,
    })
}

/// Logging policies and the full-data reference fit for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggerBundle {
    pub loggers: Vec<LoggingPolicy>,
    pub crf: LoggingPolicy,
}

pub fn fit_loggers(train_set: &SupervisedDataset, setup: &LoggerSetup) -> Result<LoggerBundle> {
    // the fit ignores alpha, so one fit serves every logger
    let base = train_logger(train_set, setup.fraction, 1.0, &setup.training)?;
    let loggers = setup
        .alphas
        .iter()
        .map(|&a| base.with_alpha(a))
        .collect::<Result<Vec<_>>>()?;
    let crf = train_logger(train_set, 1.0, setup.crf_alpha, &setup.training)?;
    Ok(LoggerBundle { loggers, crf })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub dataset: usize,
    pub method: Method,
    pub seed: u64,
    pub replay: Vec<usize>,
    pub tau: f64,
}

/// The grid of runs the suite will execute, in report order.
pub fn plan_cells(config: &ExperimentConfig) -> Vec<Cell> {
    let methods = config.methods();
    let base_tau = config.train.constraint.tau;
    let mut cells = Vec::new();
    for d in 0..config.datasets.len() {
        let mut push = |method: Method, replay: &[usize], tau: f64| {
            for &seed in &config.seeds {
                cells.push(Cell {
                    dataset: d,
                    method,
                    seed,
                    replay: replay.to_vec(),
                    tau,
                });
            }
        };
        match config.suite {
            SuiteKind::Table2 => {
                for &m in &methods {
                    push(m, &config.loggers.replay, base_tau);
                }
            }
            SuiteKind::SweepReplay => {
                for &h1 in &config.replay_sweep {
                    let mut replay = config.loggers.replay.clone();
                    replay[0] = h1;
                    for &m in &methods {
                        push(m, &replay, base_tau);
                    }
                }
            }
            SuiteKind::SweepTemperature => {
                for &m in &methods {
                    if m.is_constrained() {
                        for &t in &config.temperatures {
                            push(m, &config.loggers.replay, t);
                        }
                    } else {
                        push(m, &config.loggers.replay, base_tau);
                    }
                }
            }
        }
    }
    cells
}

/// Empirical second moments and maxima of the importance ratios behind a bound.
pub fn empirical_bound(
    method: Method,
    data: &MultiLoggerDataset,
    policy: &dyn Policy,
    loggers: &[&dyn Policy],
    eta: f64,
) -> Result<Option<BoundReport>> {
    let second = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
    let sup = |r: &[f64]| r.iter().copied().fold(0.0, f64::max);
    let loss_bound = data.num_labels() as f64;
    let deltas = losses(data);
    let (kind, risk, inputs) = match method {
        Method::Balanced | Method::BalancedReg => {
            let mixture = Mixture::new(loggers.to_vec(), &data.sizes())?;
            let ratios = balanced_ratios(data, policy, &mixture)?;
            let flat: Vec<f64> = ratios.iter().flatten().copied().collect();
            let risk = weighted_sum(&ips_terms(&ratios, &deltas), &uniform_lambda(&data.sizes()));
            let inputs = BoundInputs {
                sizes: data.sizes(),
                lambda: None,
                d2: vec![second(&flat).max(1.0)],
                sup_ratio: vec![sup(&flat)],
                m_is_empirical: true,
            };
            (BoundKind::Balanced, risk, inputs)
        }
        m if m.is_reference() => return Ok(None),
        m => {
            let ratios = importance_ratios(data, policy)?;
            let terms = ips_terms(&ratios, &deltas);
            let (kind, lambda) = if matches!(m, Method::Naive | Method::NaiveReg) {
                (BoundKind::Naive, uniform_lambda(&data.sizes()))
            } else {
                (BoundKind::LambdaWeighted, lambda_star_from(&ratios, &deltas)?)
            };
            let inputs = BoundInputs {
                sizes: data.sizes(),
                lambda: Some(lambda.clone()),
                d2: ratios.iter().map(|r| second(r).max(1.0)).collect(),
                sup_ratio: ratios.iter().map(|r| sup(r)).collect(),
                m_is_empirical: true,
            };
            (kind, weighted_sum(&terms, &lambda), inputs)
        }
    };
    generalization_bound(kind, risk, loss_bound, eta, &inputs).map(Some)
}

fn run_cell(
    config: &ExperimentConfig,
    dataset: &LoadedDataset,
    bundle: &LoggerBundle,
    cell: &Cell,
) -> Result<RunRecord> {
    let start = Instant::now();
    let mut row = ReportRow {
        dataset: dataset.name.clone(),
        method: cell.method,
        seed: cell.seed,
        replay_h1: cell.replay[0],
        replay_h2: cell.replay.get(1).copied().unwrap_or(0),
        tau: cell.tau,
        rho: config.train.constraint.rho,
        exp_loss: f64::NAN,
        val_loss: None,
        epochs: 0,
        wallclock_s: 0.0,
    };
    let reference = match cell.method {
        Method::Logger1 => Some(&bundle.loggers[0]),
        Method::Logger2 => Some(&bundle.loggers[1]),
        Method::Crf => Some(&bundle.crf),
        _ => None,
    };
    let mut record = if let Some(policy) = reference {
        row.exp_loss = evaluate_exp(policy, &dataset.test)?;
        RunRecord {
            row,
            bound: None,
            best_epoch: None,
            aborted: None,
        }
    } else {
        let loggers: Vec<&dyn Policy> = bundle.loggers.iter().map(|l| l as &dyn Policy).collect();
        let data = generate_bandit_dataset(&dataset.train, &loggers, &cell.replay, cell.seed)?;
        let mut train_cfg = config.train.clone();
        train_cfg.seed = cell.seed;
        train_cfg.constraint.tau = cell.tau;
        let outcome = train(&data, &loggers, cell.method, &train_cfg)?;
        row.exp_loss = evaluate_exp(&outcome.policy, &dataset.test)?;
        row.val_loss = Some(outcome.best_val);
        row.epochs = outcome.epochs_run;
        let bound = empirical_bound(cell.method, &data, &outcome.policy, &loggers, config.eta)?;
        RunRecord {
            row,
            bound,
            best_epoch: Some(outcome.best_epoch),
            aborted: outcome.aborted,
        }
    };
    if config.record_timing {
        record.row.wallclock_s = start.elapsed().as_secs_f64();
    }
    Ok(record)
}

/// Loads every dataset up front (so a missing file fails before any training),
/// then runs the grid with independent cells in parallel.
pub fn run_suite(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    for spec in &config.datasets {
        locate_split(&config.data_dir, spec, "train")?;
        locate_split(&config.data_dir, spec, "test")?;
    }
    let datasets = config
        .datasets
        .iter()
        .map(|s| load_dataset(&config.data_dir, s))
        .collect::<Result<Vec<_>>>()?;
    let bundles = datasets
        .par_iter()
        .map(|d| fit_loggers(&d.train, &config.loggers))
        .collect::<Result<Vec<_>>>()?;
    let cells = plan_cells(config);
    let runs = cells
        .par_iter()
        .map(|c| run_cell(config, &datasets[c.dataset], &bundles[c.dataset], c))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        suite: config.suite,
        config: config.clone(),
        runs,
    })
}
