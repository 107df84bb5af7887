//! End-to-end tests of the `gridcast` binary: exit codes, file outputs,
//! determinism, and the resolved-configuration header.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gridcast::format::load_movie;
use gridcast_core::hypertune::hyperband_schedule;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gridcast"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tiny_city(dir: &Path) -> PathBuf {
    let path = dir.join("city.gcf");
    let out = run(&[
        "synth",
        "--h",
        "8",
        "--w",
        "8",
        "--days",
        "6",
        "--interval",
        "60",
        "--seed",
        "5",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    path
}

#[test]
fn synth_writes_expected_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.gcf");
    let out = run(&[
        "synth", "--h", "8", "--w", "8", "--days", "2", "--seed", "1", "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    // 5-minute slots: 288 frames per day.
    let ds = load_movie(&path).unwrap();
    assert_eq!(ds.n_frames(), 2 * 288);
    assert_eq!(ds.height(), 8);
    assert_eq!(ds.width(), 8);
    assert_eq!(ds.channels(), 3);
    // The reproducibility header is printed before the summary.
    let text = stdout(&out);
    assert!(text.contains("# resolved synth configuration"));
    assert!(text.contains("seed = 1"));
    assert!(text.contains("on-road fraction"));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.gcf"), dir.path().join("b.gcf"));
    for p in [&a, &b] {
        let out = run(&[
            "synth", "--h", "8", "--w", "8", "--days", "2", "--seed", "9", "--out",
            p.to_str().unwrap(),
        ]);
        assert!(out.status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn synth_rejects_zero_days_before_io() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("no.gcf");
    let out = run(&[
        "synth", "--h", "8", "--w", "8", "--days", "0", "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(!path.exists(), "no partial output on validation failure");
}

#[test]
fn train_single_epoch_writes_one_log_row() {
    let dir = tempfile::tempdir().unwrap();
    let city = tiny_city(dir.path());
    let ckpt = dir.path().join("m.gcp");
    let log = dir.path().join("m.csv");
    let out = run(&[
        "train",
        "--data",
        city.to_str().unwrap(),
        "--model",
        "tr+b",
        "--history",
        "2",
        "--hidden",
        "8",
        "--slots",
        "4,12,20",
        "--max-epochs",
        "1",
        "--out",
        ckpt.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "header plus exactly one epoch row: {text}");
    assert_eq!(lines[0], "epoch,train_mse,val_mse,lr,is_best");
    assert!(ckpt.exists());
}

#[test]
fn train_missing_data_exits_2_with_path() {
    let out = run(&[
        "train",
        "--data",
        "/nonexistent/data.gcf",
        "--out",
        "/tmp/whatever.gcp",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/nonexistent/data.gcf"));
}

#[test]
fn eval_prints_one_row_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let city = tiny_city(dir.path());
    let csv = dir.path().join("table.csv");
    let out = run(&[
        "eval",
        "--data",
        city.to_str().unwrap(),
        "--baseline",
        "zeros",
        "--baseline",
        "naive",
        "--baseline",
        "average",
        "--slots",
        "4,12,20",
        "--out-csv",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    for method in ["zeros", "naive", "average"] {
        assert!(text.contains(&format!("| {method} |")), "{text}");
    }
    // CSV carries the same rows.
    let table = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn eval_overfit_checkpoint_scores_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    // One-day city used for both training and evaluation.
    let city = dir.path().join("one.gcf");
    let out = run(&[
        "synth", "--h", "8", "--w", "8", "--days", "1", "--interval", "60", "--seed", "2",
        "--out", city.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let ckpt = dir.path().join("overfit.gcp");
    let out = run(&[
        "train",
        "--data",
        city.to_str().unwrap(),
        "--model",
        "tr+b",
        "--history",
        "2",
        "--hidden",
        "8",
        "--slots",
        "4,12,20",
        "--lr",
        "0.05",
        "--day-fraction",
        "1.0",
        "--max-epochs",
        "300",
        "--early-stop",
        "300",
        "--plateau-patience",
        "50",
        "--val-fraction",
        "0",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    // A zero validation fraction cannot split; expect a clean failure.
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    // Use two copies of the same day instead.
    let city2 = dir.path().join("two.gcf");
    let o = run(&[
        "synth", "--h", "8", "--w", "8", "--days", "2", "--interval", "60", "--seed", "2",
        "--hour-amp", "0", "--week-amp", "0", "--month-amp", "0", "--noise", "0",
        "--out", city2.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let o = run(&[
        "train",
        "--data",
        city2.to_str().unwrap(),
        "--model",
        "tr+b",
        "--history",
        "2",
        "--hidden",
        "8",
        "--slots",
        "4,12,20",
        "--lr",
        "0.05",
        "--day-fraction",
        "1.0",
        "--max-epochs",
        "300",
        "--early-stop",
        "300",
        "--plateau-patience",
        "50",
        "--val-fraction",
        "0.5",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = run(&[
        "eval",
        "--data",
        city2.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--slots",
        "4,12,20",
        "--eval-fraction",
        "0.5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    // The overfit row reports ~0.00 cells in the 10^-3 table.
    let text = stdout(&o);
    let row = text
        .lines()
        .find(|l| l.starts_with("| overfit "))
        .expect("overfit row");
    for cell in row.split('|').skip(2).filter(|c| !c.trim().is_empty()) {
        let value: f64 = cell.trim().parse().unwrap();
        assert!(value < 0.01, "cell {value} in {row}");
    }
}

#[test]
fn tune_r1_runs_single_trial() {
    let dir = tempfile::tempdir().unwrap();
    let city = tiny_city(dir.path());
    let trace = dir.path().join("trace.csv");
    let best = dir.path().join("best.conf");
    let out = run(&[
        "tune",
        "--data",
        city.to_str().unwrap(),
        "--r",
        "1",
        "--eta",
        "3",
        "--seed",
        "4",
        "--slots",
        "4,12,20",
        "--history-set",
        "2",
        "--hidden-set",
        "8",
        "--trace",
        trace.to_str().unwrap(),
        "--best-out",
        best.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().count(), 2, "header plus one trial: {text}");
    assert!(text.starts_with(
        "trial_id,bracket,rung,budget_epochs,lr,n_layers,hidden_channels,kernel_size,history,bias_combination,val_mse,status"
    ));
    // The best-config file parses as a config file for `train`.
    let best_text = std::fs::read_to_string(&best).unwrap();
    assert!(best_text.contains("lr = "));
    assert!(best_text.contains("biases = "));
}

#[test]
fn tune_trace_matches_schedule_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let city = tiny_city(dir.path());
    let run_tune = |trace: &Path| {
        let out = run(&[
            "tune",
            "--data",
            city.to_str().unwrap(),
            "--r",
            "4",
            "--eta",
            "2",
            "--seed",
            "11",
            "--slots",
            "4,12,20",
            "--history-set",
            "2,3",
            "--hidden-set",
            "4,8",
            "--layers-set",
            "1,2",
            "--trace",
            trace.to_str().unwrap(),
            "--best-out",
            dir.path().join("b.conf").to_str().unwrap(),
            "--threads",
            "2",
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    };

    let t1 = dir.path().join("t1.csv");
    let t2 = dir.path().join("t2.csv");
    run_tune(&t1);
    run_tune(&t2);

    let a = std::fs::read(&t1).unwrap();
    assert_eq!(a, std::fs::read(&t2).unwrap(), "byte-identical traces");

    let expected: usize = hyperband_schedule(4, 2)
        .unwrap()
        .iter()
        .map(|b| b.trial_count())
        .sum();
    let rows = String::from_utf8(a).unwrap().lines().count() - 1;
    assert_eq!(rows, expected);
}

#[test]
fn config_file_merging_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("synth.conf");
    std::fs::write(&conf, "h = 8\nw = 8\ndays = 1\nseed = 3\n").unwrap();
    let out_path = dir.path().join("f.gcf");

    // Flags override the file; the file fills the rest.
    let out = run(&[
        "synth",
        "--config",
        conf.to_str().unwrap(),
        "--days",
        "2",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ds = load_movie(&out_path).unwrap();
    assert_eq!(ds.n_days(), 2);
    assert_eq!(ds.height(), 8);

    // Unknown keys are rejected.
    std::fs::write(&conf, "h = 8\nturbo = yes\n").unwrap();
    let out = run(&[
        "synth",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("turbo"));
}
