use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use mlog_core::bandit::{generate_bandit_dataset, read_bandit, write_bandit};
use mlog_core::data::{
    parse_multilabel_libsvm, parse_multilabel_libsvm_with, read_sparse_libsvm, write_libsvm, Dims,
    SupervisedDataset, TruncatedSvd, SVD_SEED,
};
use mlog_core::experiment::{
    empirical_bound, fit_loggers, ExperimentConfig, ExperimentReport, LoggerBundle, LoggerSetup,
    SuiteKind,
};
use mlog_core::policy::{NeuralPolicy, Policy};
use mlog_core::train::{evaluate_exp, train, Method, TrainOutcome};

#[derive(Parser)]
#[command(name = "mlog", version, about = "Off-policy learning from multiple logging policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit logging policies on a supervised multi-label file.
    Prepare(PrepareArgs),
    /// Replay a supervised file through the loggers to produce bandit feedback.
    Bandit(BanditArgs),
    /// Train one method on bandit feedback.
    Train(TrainArgs),
    /// Expected Hamming loss of a policy on a supervised test file.
    Eval(EvalArgs),
    /// Run an experiment suite and write `<out>.csv` and `<out>.json`.
    Suite(SuiteArgs),
    /// Per-cell medians of a suite report.
    Report(ReportArgs),
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Project sparse features onto this many singular directions (fitted on --train).
    #[arg(long)]
    svd_rank: Option<usize>,
    /// Logit multiplier per logger.
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 2.0])]
    alpha: Vec<f64>,
    /// Leading share of training rows the loggers are fitted on.
    #[arg(long, default_value_t = 0.2)]
    fraction: f64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Receives `loggers.json`, plus projected `train.svm`/`test.svm` with --svd-rank.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BanditArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    loggers: PathBuf,
    /// Passes over the rows per logger.
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 4])]
    replay: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    bandit: PathBuf,
    #[arg(long, value_parser = parse_method)]
    method: Method,
    /// Logger file; required by the balanced methods and for the bound.
    #[arg(long)]
    loggers: Option<PathBuf>,
    /// Experiment TOML; only its `[train]` table and `eta` are read.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Report the expected Hamming loss on this supervised file.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Receives the training outcome (policy and history) as JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// A training outcome, a bare policy, or a logger file (with --logger).
    #[arg(long)]
    policy: PathBuf,
    /// Logger index, or `crf`, when --policy is a logger file.
    #[arg(long)]
    logger: Option<String>,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args)]
struct SuiteArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_suite)]
    kind: Option<SuiteKind>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Run only these seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    method: Vec<Method>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    /// Replay count per logger.
    #[arg(long, value_delimiter = ',')]
    replay: Vec<usize>,
    /// First-logger replay counts of the replay sweep.
    #[arg(long, value_delimiter = ',')]
    replay_sweep: Vec<usize>,
    /// Temperatures of the temperature sweep.
    #[arg(long, value_delimiter = ',')]
    temperatures: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Write 0 for wall-clock time so identical runs give identical files.
    #[arg(long)]
    no_timing: bool,
    /// Output stem; `.csv` and `.json` are appended.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    input: PathBuf,
    /// Print the per-run CSV instead of the summary.
    #[arg(long)]
    csv: bool,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: mlog_core::CoreError| e.to_string())
}

fn parse_suite(s: &str) -> std::result::Result<SuiteKind, String> {
    s.parse().map_err(|e: mlog_core::CoreError| e.to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Reads a supervised file at the widths a policy expects.
fn read_sized(path: &Path, policy: &dyn Policy) -> Result<SupervisedDataset> {
    let dims = Dims {
        num_features: Some(policy.num_features()),
        num_labels: Some(policy.num_labels()),
    };
    Ok(parse_multilabel_libsvm_with(path, dims)?)
}

fn prepare(args: PrepareArgs) -> Result<()> {
    fs::create_dir_all(&args.out_dir)?;
    let (train_set, test_set) = match args.svd_rank {
        None => {
            let train_set = parse_multilabel_libsvm(&args.train)?;
            let test_set = match &args.test {
                Some(p) => Some(read_sized_like(p, &train_set)?),
                None => None,
            };
            (train_set, test_set)
        }
        Some(k) => {
            let sparse = read_sparse_libsvm(&args.train, Dims::default())?;
            let svd = TruncatedSvd::fit_sparse(&sparse, k, SVD_SEED)?;
            let train_set = svd.transform_sparse(&sparse)?;
            write_libsvm(&train_set, args.out_dir.join("train.svm"))?;
            let test_set = match &args.test {
                Some(p) => {
                    let dims = Dims {
                        num_features: Some(sparse.num_features),
                        num_labels: Some(sparse.num_labels),
                    };
                    let t = svd.transform_sparse(&read_sparse_libsvm(p, dims)?)?;
                    write_libsvm(&t, args.out_dir.join("test.svm"))?;
                    Some(t)
                }
                None => None,
            };
            (train_set, test_set)
        }
    };
    let mut setup = LoggerSetup {
        alphas: args.alpha,
        fraction: args.fraction,
        ..LoggerSetup::default()
    };
    setup.training.steps = args.steps;
    let bundle = fit_loggers(&train_set, &setup)?;
    let out = args.out_dir.join("loggers.json");
    write_json(&out, &bundle)?;
    println!("wrote {}", out.display());
    if let Some(test_set) = test_set {
        for (j, l) in bundle.loggers.iter().enumerate() {
            println!("logger{} exp_loss {:.6}", j + 1, evaluate_exp(l, &test_set)?);
        }
        println!("crf exp_loss {:.6}", evaluate_exp(&bundle.crf, &test_set)?);
    }
    Ok(())
}

fn read_sized_like(path: &Path, like: &SupervisedDataset) -> Result<SupervisedDataset> {
    let dims = Dims {
        num_features: Some(like.num_features()),
        num_labels: Some(like.num_labels()),
    };
    Ok(parse_multilabel_libsvm_with(path, dims)?)
}

fn bandit(args: BanditArgs) -> Result<()> {
    let bundle: LoggerBundle = read_json(&args.loggers)?;
    let first = bundle.loggers.first().ok_or_else(|| anyhow!("logger file has no loggers"))?;
    let data = read_sized(&args.train, first)?;
    let loggers: Vec<&dyn Policy> = bundle.loggers.iter().map(|l| l as &dyn Policy).collect();
    let logs = generate_bandit_dataset(&data, &loggers, &args.replay, args.seed)?;
    write_bandit(&logs, &args.out)?;
    println!("wrote {} records per logger {:?} to {}", logs.len(), logs.sizes(), args.out.display());
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let config = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = config.train.clone();
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.tau {
        cfg.constraint.tau = t;
    }
    if let Some(r) = args.rho {
        cfg.constraint.rho = r;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    let data = read_bandit(&args.bandit)?;
    let bundle: Option<LoggerBundle> = args.loggers.as_deref().map(read_json).transpose()?;
    let loggers: Vec<&dyn Policy> = bundle
        .iter()
        .flat_map(|b| b.loggers.iter().map(|l| l as &dyn Policy))
        .collect();
    let outcome = train(&data, &loggers, args.method, &cfg)?;
    write_json(&args.out, &outcome)?;
    println!(
        "method {} best_epoch {} best_val {:.6} epochs {}",
        args.method, outcome.best_epoch, outcome.best_val, outcome.epochs_run
    );
    if let Some(msg) = &outcome.aborted {
        println!("aborted: {msg}");
    }
    if let Some(test) = &args.test {
        let test_set = read_sized(test, &outcome.policy)?;
        println!("exp_loss {:.6}", evaluate_exp(&outcome.policy, &test_set)?);
    }
    if !loggers.is_empty() {
        if let Some(b) = empirical_bound(args.method, &data, &outcome.policy, &loggers, config.eta)? {
            println!("bound {:.6} (eta {})", b.bound, b.eta);
        }
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&args.policy)
        .with_context(|| format!("reading {}", args.policy.display()))?;
    let exp = if let Some(which) = &args.logger {
        let bundle: LoggerBundle = serde_json::from_str(&text)
            .with_context(|| format!("{} is not a logger file", args.policy.display()))?;
        let logger = if which == "crf" {
            &bundle.crf
        } else {
            let j: usize = which.parse().context("--logger takes an index or `crf`")?;
            bundle
                .loggers
                .get(j)
                .ok_or_else(|| anyhow!("logger {j} out of range"))?
        };
        evaluate_exp(logger, &read_sized(&args.test, logger)?)?
    } else {
        let policy: NeuralPolicy = match serde_json::from_str::<TrainOutcome>(&text) {
            Ok(o) => o.policy,
            Err(_) => serde_json::from_str(&text).with_context(|| {
                format!("{} is neither a training outcome nor a policy", args.policy.display())
            })?,
        };
        evaluate_exp(&policy, &read_sized(&args.test, &policy)?)?
    };
    println!("exp_loss {exp:.6}");
    Ok(())
}

fn suite(args: SuiteArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(k) = args.kind {
        config.suite = k;
    }
    if let Some(d) = args.data_dir {
        config.data_dir = d;
    }
    if !args.seed.is_empty() {
        config.seeds = args.seed;
    }
    if !args.method.is_empty() {
        config.methods = Some(args.method);
    }
    if let Some(t) = args.tau {
        config.train.constraint.tau = t;
    }
    if let Some(r) = args.rho {
        config.train.constraint.rho = r;
    }
    if !args.replay.is_empty() {
        config.loggers.replay = args.replay;
    }
    if !args.replay_sweep.is_empty() {
        config.replay_sweep = args.replay_sweep;
    }
    if !args.temperatures.is_empty() {
        config.temperatures = args.temperatures;
    }
    if !args.alpha.is_empty() {
        config.loggers.alphas = args.alpha;
    }
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    if args.no_timing {
        config.record_timing = false;
    }
    let report = mlog_core::experiment::run_suite(&config)?;
    let (csv, json) = report.write(&args.out)?;
    print_summary(&report);
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

fn print_summary(report: &ExperimentReport) {
    println!("dataset\tmethod\treplay\ttau\tmedian_exp\tseeds");
    for r in report.summarize() {
        println!(
            "{}\t{}\t{},{}\t{}\t{:.6}\t{}",
            r.dataset, r.method, r.replay_h1, r.replay_h2, r.tau, r.median_exp, r.seeds
        );
    }
    let aborted = report.runs.iter().filter(|r| r.aborted.is_some()).count();
    if aborted > 0 {
        println!("{aborted} run(s) aborted early");
    }
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let report = ExperimentReport::load_json(&args.input)?;
    if args.csv {
        print!("{}", report.to_csv_string()?);
    } else {
        print_summary(&report);
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Prepare(a) => prepare(a),
        Command::Bandit(a) => bandit(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Suite(a) => suite(a),
        Command::Report(a) => report_cmd(a),
    }
}
