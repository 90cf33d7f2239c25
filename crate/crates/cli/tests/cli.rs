use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mlog_core::data::{write_libsvm, SupervisedDataset};
use mlog_core::experiment::{ExperimentReport, CSV_HEADER};
use mlog_core::train::TrainOutcome;

const SMALL_CONFIG: &str = r#"
datasets = ["toy"]
seeds = [0]
methods = ["logger1", "naive", "weighted-reg"]
[loggers]
replay = [2, 2]
[loggers.training]
steps = 50
lr = 0.1
l2 = 1e-4
eps = 1e-4
[train]
epochs = 2
lr = 1e-2
batch_size = 16
generator_hidden = [4]
discriminator_hidden = [4]
[train.constraint]
max_iter = 1
batch_size = 16
"#;

fn mlog(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlog")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mlog(args);
    assert!(
        out.status.success(),
        "mlog {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// 3 features, 2 labels; label l is on when feature l is positive.
fn synthetic(rows: usize, offset: usize) -> SupervisedDataset {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..rows {
        let k = (i + offset) as f64;
        let row = vec![(k * 0.7).sin(), (k * 1.3).cos(), 1.0 + (k * 0.1).sin()];
        y.push(vec![u8::from(row[0] > 0.0), u8::from(row[1] > 0.0)]);
        x.push(row);
    }
    SupervisedDataset::from_rows("toy", &x, &y).unwrap()
}

fn write_toy(dir: &Path) {
    write_libsvm(&synthetic(48, 0), dir.join("toy_train.svm")).unwrap();
    write_libsvm(&synthetic(16, 100), dir.join("toy_test.svm")).unwrap();
    fs::write(dir.join("small.toml"), SMALL_CONFIG).unwrap();
}

fn exp_of(stdout: &str) -> f64 {
    let line = stdout.lines().find(|l| l.starts_with("exp_loss")).unwrap();
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn single_run_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_toy(d);
    let p = |name: &str| d.join(name).to_str().unwrap().to_owned();

    let prep = ok(&[
        "prepare", "--train", &p("toy_train.svm"), "--test", &p("toy_test.svm"),
        "--steps", "50", "--out-dir", &p("out"),
    ]);
    assert!(prep.contains("logger1 exp_loss") && prep.contains("crf exp_loss"));

    ok(&[
        "bandit", "--train", &p("toy_train.svm"), "--loggers", &p("out/loggers.json"),
        "--replay", "2,3", "--seed", "7", "--out", &p("logs.bandit"),
    ]);
    let logs = mlog_core::bandit::read_bandit(d.join("logs.bandit")).unwrap();
    assert_eq!(logs.sizes(), vec![96, 144]);

    for method in ["naive", "weighted-reg", "balanced"] {
        let out_file = p(&format!("{method}.json"));
        let stdout = ok(&[
            "train", "--bandit", &p("logs.bandit"), "--loggers", &p("out/loggers.json"),
            "--method", method, "--config", &p("small.toml"), "--seed", "3",
            "--test", &p("toy_test.svm"), "--out", &out_file,
        ]);
        let trained = exp_of(&stdout);
        assert!((0.0..=2.0).contains(&trained));
        assert!(stdout.contains("bound "));
        let outcome: TrainOutcome = serde_json::from_str(&fs::read_to_string(&out_file).unwrap()).unwrap();
        assert_eq!(outcome.epochs_run, 2);

        let evaluated = exp_of(&ok(&["eval", "--policy", &out_file, "--test", &p("toy_test.svm")]));
        assert!((evaluated - trained).abs() < 1e-6);
    }

    let logger = exp_of(&ok(&[
        "eval", "--policy", &p("out/loggers.json"), "--logger", "crf", "--test", &p("toy_test.svm"),
    ]));
    assert!((0.0..=2.0).contains(&logger));
}

#[test]
fn suite_is_reproducible_without_timing() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_toy(d);
    let run = |stem: &str| {
        ok(&[
            "suite", "--config", d.join("small.toml").to_str().unwrap(),
            "--data-dir", d.to_str().unwrap(), "--seed", "0,1", "--no-timing",
            "--out", d.join(stem).to_str().unwrap(),
        ])
    };
    let summary = run("a");
    run("b");
    let a = fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("b.csv")).unwrap());
    assert_eq!(a.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(a.lines().count(), 1 + 3 * 2);
    assert!(summary.contains("weighted-reg"));

    let report = ExperimentReport::load_json(d.join("a.json")).unwrap();
    assert_eq!(report.runs.len(), 6);
    let reported = ok(&["report", "--input", d.join("a.json").to_str().unwrap()]);
    assert_eq!(reported.lines().count(), 1 + 3);
    assert_eq!(ok(&["report", "--input", d.join("a.json").to_str().unwrap(), "--csv"]), a);
}

#[test]
fn replay_sweep_overrides_from_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_toy(d);
    ok(&[
        "suite", "--config", d.join("small.toml").to_str().unwrap(), "--kind", "sweep-replay",
        "--data-dir", d.to_str().unwrap(), "--method", "naive", "--replay-sweep", "1,2",
        "--replay", "1,1", "--alpha", "0.5,1.5", "--no-timing", "--out", d.join("r").to_str().unwrap(),
    ]);
    let report = ExperimentReport::load_json(d.join("r.json")).unwrap();
    let h1: Vec<usize> = report.runs.iter().map(|r| r.row.replay_h1).collect();
    assert_eq!(h1, vec![1, 2]);
    assert!(report.runs.iter().all(|r| r.row.replay_h2 == 1));
    assert_eq!(report.config.loggers.alphas, vec![0.5, 1.5]);
}

#[test]
fn missing_dataset_and_bad_method_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mlog(&[
        "suite", "--data-dir", tmp.path().to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset not found"));
    assert!(!tmp.path().join("x.csv").exists());

    let out = mlog(&["train", "--bandit", "nope", "--method", "best", "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown method"));
}
