mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn convexlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convexlab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CONVEXLAB_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Temp workspace with a tiny MNIST-format data dir at `data/`.
fn workspace() -> TempDir {
    let tmp = TempDir::new().unwrap();
    common::write_mnist_dir(&tmp.path().join("data"));
    tmp
}

const TINY: &[&str] = &[
    "--data-dir",
    "data",
    "--out",
    "out",
    "--net",
    "4,5,10",
    "--set",
    "train_count=40",
    "--set",
    "val_count=20",
    "--set",
    "test_count=20",
    "--batch-size",
    "10",
    "--epochs",
    "6",
];

fn with<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(tail).copied().collect()
}

fn lambda_column(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header, ["epoch", "train_criterion", "train_ce", "val_ce", "val_error", "lambda", "switched", "wall_ms"]);
    lines.map(|l| l.split(',').nth(5).unwrap().to_string()).collect()
}

fn without_wall_ms(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn fetch_downloads_then_reports_cache() {
    let server = common::serve(common::mnist_files());
    let tmp = TempDir::new().unwrap();
    let args = ["fetch", "--data-dir", "d", "--base-url", server.base_url.as_str()];
    let first = convexlab(&args, tmp.path());
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert!(stdout(&first).contains("downloaded 4 file(s)"));
    assert_eq!(fs::read_dir(tmp.path().join("d")).unwrap().count(), 4);
    let again = convexlab(&args, tmp.path());
    assert_eq!(code(&again), 0);
    assert!(stdout(&again).contains("cached"));
    assert_eq!(server.request_count(), 4);
}

#[test]
fn fetch_bad_url_is_a_transport_failure() {
    let server = common::serve(Default::default());
    let tmp = TempDir::new().unwrap();
    let out = convexlab(&["fetch", "--data-dir", "d", "--base-url", server.base_url.as_str()], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("404"), "{}", stderr(&out));
}

#[test]
fn train_anrat_moves_lambda_and_ce_keeps_it() {
    let tmp = workspace();
    let anrat = convexlab(&with(&["train", "--strategy", "anrat", "--run-name", "a", "--lr", "0.5"], TINY), tmp.path());
    assert_eq!(code(&anrat), 0, "{}", stderr(&anrat));
    assert!(stdout(&anrat).contains("test_error="));
    let lambdas = lambda_column(&tmp.path().join("out/a.metrics.csv"));
    assert_eq!(lambdas.len(), 6);
    assert!(lambdas.windows(2).any(|w| w[0] != w[1]), "{lambdas:?}");
    assert!(tmp.path().join("out/a.model").exists());

    let ce = convexlab(&with(&["train", "--strategy", "ce", "--run-name", "c"], TINY), tmp.path());
    assert_eq!(code(&ce), 0, "{}", stderr(&ce));
    let lambdas = lambda_column(&tmp.path().join("out/c.metrics.csv"));
    assert!(lambdas.iter().all(|l| l == "10"), "{lambdas:?}");
}

#[test]
fn train_without_strategy_names_the_key() {
    let tmp = workspace();
    let out = convexlab(&with(&["train"], TINY), tmp.path());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("missing required key 'strategy'"), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_one() {
    let tmp = workspace();
    fs::write(tmp.path().join("bad.cfg"), "strategy = ce\nlearning_rate = 0.1\n").unwrap();
    let out = convexlab(&with(&["train", "--config", "bad.cfg"], TINY), tmp.path());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("bad.cfg:2"), "{}", stderr(&out));

    let out = convexlab(&with(&["train", "--strategy", "anrat", "--decay", "0.5"], TINY), tmp.path());
    assert_eq!(code(&out), 1);

    let out = convexlab(&["train", "--strategy", "ce", "--net", "784,10", "--data-dir", "nowhere"], tmp.path());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("convexlab fetch"), "{}", stderr(&out));

    let out = convexlab(&["train", "--bogus-flag"], tmp.path());
    assert_eq!(code(&out), 1);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = workspace();
    let out = convexlab(&with(&["train", "--strategy", "anrat", "--run-name", "r", "--seed", "4"], TINY), tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let resolved = tmp.path().join("out/r.resolved.cfg");
    let text = fs::read_to_string(&resolved).unwrap();
    assert!(text.contains("seed = 4\n") && text.contains("strategy = anrat\n"));
    assert!(!text.contains("decay"));
    let copy = tmp.path().join("again.cfg");
    fs::write(&copy, text.replace("run_name = r\n", "run_name = again\n")).unwrap();
    let out = convexlab(&["train", "--config", "again.cfg"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let dir = tmp.path().join("out");
    assert_eq!(without_wall_ms(&dir.join("r.metrics.csv")), without_wall_ms(&dir.join("again.metrics.csv")));
    assert_eq!(fs::read(dir.join("r.model")).unwrap(), fs::read(dir.join("again.model")).unwrap());

    let out = convexlab(&with(&["train", "--strategy", "anrat", "--run-name", "s", "--seed", "5"], TINY), tmp.path());
    assert_eq!(code(&out), 0);
    assert_ne!(fs::read(dir.join("r.model")).unwrap(), fs::read(dir.join("s.model")).unwrap());
}

#[test]
fn eval_reports_the_saved_model() {
    let tmp = workspace();
    let out = convexlab(&with(&["train", "--strategy", "ce", "--run-name", "e"], TINY), tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let trained = stdout(&out);
    let reported = trained.lines().find(|l| l.starts_with("best model:")).unwrap();
    let metrics = reported.split_once(": ").unwrap().1;
    let eval_args = ["eval", "--data-dir", "data", "--set", "train_count=40", "--set", "val_count=20", "--set", "test_count=20", "--model", "out/e.model"];
    let out = convexlab(&eval_args, tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains(metrics), "{} vs {metrics}", stdout(&out));

    let out = convexlab(&["eval", "--data-dir", "data"], tmp.path());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("'model'"));
}

#[test]
fn divergence_exits_three() {
    let tmp = TempDir::new().unwrap();
    let args = ["train", "--dataset", "sine", "--net", "1,8,1", "--strategy", "ce", "--lr", "1e100", "--out", "out"];
    let out = convexlab(&args, tmp.path());
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));

    let out = convexlab(
        &["gridsearch", "--dataset", "sine", "--net", "1,8,1", "--strategy", "anrat", "--grid-lr", "1e100,1e120", "--out", "out"],
        tmp.path(),
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

fn grid_rows(path: &PathBuf) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("lr,a,best_val_ce,best_val_error,status"));
    lines.map(str::to_string).collect()
}

#[test]
fn gridsearch_rows_and_flag_conflicts() {
    let tmp = workspace();
    let out = convexlab(&with(&["gridsearch", "--strategy", "anrat", "--run-name", "g"], TINY), tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("best: lr="));
    let rows = grid_rows(&tmp.path().join("out/g.grid.csv"));
    assert_eq!(rows.len(), 9);

    let out = convexlab(&with(&["gridsearch", "--strategy", "anrat", "--run-name", "g2"], TINY), tmp.path());
    assert_eq!(code(&out), 0);
    assert_eq!(rows, grid_rows(&tmp.path().join("out/g2.grid.csv")));

    let single = with(&["gridsearch", "--strategy", "anrat", "--run-name", "one", "--lr", "0.5", "--a", "0.1"], TINY);
    let out = convexlab(&single, tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = grid_rows(&tmp.path().join("out/one.grid.csv"));
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("0.5,0.1,") && rows[0].ends_with(",ok"), "{rows:?}");

    for conflict in [["--lr", "0.5", "--grid-lr", "1,0.1"], ["--a", "0.1", "--grid-a", "1,0.1"]] {
        let out = convexlab(&with(&with(&["gridsearch", "--strategy", "anrat"], &conflict), TINY), tmp.path());
        assert_eq!(code(&out), 1, "{conflict:?}");
        assert!(stderr(&out).contains("mutually exclusive"));
    }
}

#[test]
fn gradcheck_passes_and_tolerance_flag_bites() {
    let tmp = TempDir::new().unwrap();
    let out = convexlab(&["gradcheck", "--out", "o"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("criterion,checked,max_weight_rel_error,max_lambda_rel_error\n"), "{text}");
    for kind in ["ce,", "rae,", "nrae,", "anrat,"] {
        assert!(text.lines().any(|l| l.starts_with(kind)), "{kind} missing: {text}");
    }

    let out = convexlab(&["gradcheck", "--out", "o", "--lambda", "100", "--p", "2", "--configs", "30"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let out = convexlab(&["gradcheck", "--out", "o", "--configs", "5", "--tolerance", "1e-12"], tmp.path());
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("FAIL ") && stderr(&out).contains("net ["), "{}", stderr(&out));
}

#[test]
fn scan_matches_golden_summary() {
    let tmp = TempDir::new().unwrap();
    let out = convexlab(
        &["scan", "--net", "1,3,1", "--lambdas", "1,2,4,8", "--points", "200", "--out", "o", "--run-name", "s"],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let golden = include_str!("golden/scan_1-3-1_summary.csv");
    let got = fs::read_to_string(tmp.path().join("o/s.scan_summary.csv")).unwrap();
    assert_eq!(got, golden);
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("lambda=")).count(), 4);
    let points = fs::read_to_string(tmp.path().join("o/s.scan_points.csv")).unwrap();
    assert_eq!(points.lines().count(), 1 + 200 * 4);
}

#[test]
fn scan_presets_and_preconditions() {
    let tmp = TempDir::new().unwrap();
    let out = convexlab(&["scan", "--preset", "logistic", "--points", "50", "--out", "o", "--run-name", "l"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = fs::read_to_string(tmp.path().join("o/l.scan_summary.csv")).unwrap();
    assert_eq!(summary, "lambda,psd_fraction\n1,1\n2,1\n4,1\n8,1\n");

    let out = convexlab(&["scan", "--net", "1,3,1", "--lambdas", "8,4", "--out", "o"], tmp.path());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("ascending"));

    let out = convexlab(&["scan", "--net", "1,30,1", "--points", "2", "--out", "o"], tmp.path());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("limited to"), "{}", stderr(&out));

    let out = convexlab(&["scan", "--preset", "quadratic"], tmp.path());
    assert_eq!(code(&out), 1);
}
