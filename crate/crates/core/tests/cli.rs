use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rwdfusion::bench::METRICS_HEADER;
use rwdfusion::config;
use rwdfusion::fusion::Method;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rwdfusion")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

#[test]
fn smoke_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let o = cli(&["run", "--out", &out, "--reps", "3", "--methods", "rct_only,mse_minimizing", "--psi", "0,0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), 4);
    assert!(dir.path().join("config.txt").exists());
    assert!(fs::read_dir(dir.path()).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "svg")));
}

#[test]
fn usage_errors_exit_two_and_name_the_token() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let o = cli(&["run", "--out", &out, "--methods", "rct_only,wizardry"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("wizardry"), "{}", stderr(&o));

    let o = cli(&["run", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus-flag"));

    let o = cli(&["run", "--config", "/definitely/not/here.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/definitely/not/here.txt"));

    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "reps = 3\nrepz = 4\n").unwrap();
    let o = cli(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("repz"));

    let o = cli(&["run", "--nco", "x9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("x9"));
}

#[test]
fn simulate_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = cli(&["simulate", "--out", &out_arg(d.path()), "--rep", "4", "--psi", "0.5"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["rct.csv", "rwd.csv"] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join(f)).unwrap());
    }
    let rct = fs::read_to_string(a.path().join("rct.csv")).unwrap();
    assert_eq!(rct.lines().count(), 301);
    assert!(!rct.lines().next().unwrap().contains("u1"));

    let o = cli(&["simulate", "--out", &out_arg(b.path()), "--rep", "4", "--debug-oracle"]);
    assert!(o.status.success());
    let header = fs::read_to_string(b.path().join("rct.csv")).unwrap().lines().next().unwrap().to_string();
    assert!(header.contains("u1") && header.contains("y0") && header.contains("y1"), "{header}");
}

#[test]
fn report_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let args = ["--out", &out, "--reps", "3", "--methods", "rct_only,test_then_pool", "--psi", "0,1", "--seed", "99"];
    let o = cli(&[&["run"][..], &args].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let first = fs::read(dir.path().join("metrics.csv")).unwrap();

    let o = cli(&[&["report"][..], &args].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("test_then_pool") && (stdout.contains("PASS") || stdout.contains("FAIL")), "{stdout}");

    let text = fs::read_to_string(dir.path().join("config.txt")).unwrap();
    let g = config::parse(&text).unwrap();
    assert_eq!(config::render(&g), text);
    assert_eq!(g.scenario.seed, 99);
    assert_eq!(g.methods, vec![Method::RctOnly, Method::TestThenPool]);

    // rerunning from the written config reproduces the metrics
    let again = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.txt");
    let o = cli(&["run", "--config", cfg.to_str().unwrap(), "--out", &out_arg(again.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(again.path().join("metrics.csv")).unwrap(), first);
}

#[test]
fn report_without_run_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["report", "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("metrics.csv"));
}

#[test]
fn every_method_runs_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    for m in Method::ALL {
        let out = out_arg(&dir.path().join(m.name()));
        let o = cli(&["run", "--out", &out, "--reps", "2", "--methods", m.name(), "--psi", "0.3", "--fast"]);
        assert!(o.status.success(), "{}: {}", m.name(), stderr(&o));
        let csv = fs::read_to_string(dir.path().join(m.name()).join("metrics.csv")).unwrap();
        assert!(csv.lines().any(|l| l.starts_with(m.name())), "{}: {csv}", m.name());
        assert!(csv.lines().skip(1).all(|l| l.ends_with(",0")), "{}: failures in {csv}", m.name());
    }
}
