use mfsbi_cli::report::{parse_pivot_csv, pivot_csv, summarize};
use mfsbi_cli::{cmd_run, read_rows, Algorithm, ExperimentConfig, Metric, RunError, StoreError, TaskId};
use std::path::Path;
use std::process::Command;

fn small(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        algorithm: Algorithm::Npe,
        hf_budgets: vec![50],
        seeds: vec![0, 1],
        observations: 2,
        metrics: vec![Metric::Nrmse, Metric::Nltp],
        posterior_samples: 100,
        transforms: 2,
        hidden_units: 16,
        max_epochs: 5,
        output: out.to_path_buf(),
        ..Default::default()
    }
}

fn mfsbi() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mfsbi"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn simulate_writes_n_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let s = mfsbi()
            .args(["simulate", "--task", "ou2", "--fidelity", "low", "-n", "7", "--seed", "3", "--out"])
            .arg(p)
            .output()
            .unwrap();
        assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
        assert!(String::from_utf8_lossy(&s.stdout).contains("rows 7"));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn simulate_rejects_zero_rows() {
    let s = mfsbi().args(["simulate", "--task", "ou2", "-n", "0"]).output().unwrap();
    assert!(!s.status.success());
    assert!(String::from_utf8_lossy(&s.stderr).contains("-n"));
}

#[test]
fn rerun_is_cached_and_rows_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let first = cmd_run(&cfg).unwrap();
    assert_eq!((first.executed, first.cached), (2, 0));
    assert_eq!(first.rows.len(), 2 * 2 * 2);
    let second = cmd_run(&cfg).unwrap();
    assert_eq!((second.executed, second.cached), (0, 2));
    assert_eq!(first.rows, second.rows);
    assert_eq!(read_rows(dir.path()).unwrap().len(), 8);
}

#[test]
fn changed_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    cmd_run(&small(dir.path())).unwrap();
    let changed = ExperimentConfig { learning_rate: 1e-3, ..small(dir.path()) };
    match cmd_run(&changed) {
        Err(RunError::Store(StoreError::ConfigMismatch { .. })) => {}
        other => panic!("expected a config mismatch, got {other:?}"),
    }
}

#[test]
fn report_handles_empty_and_single_rows() {
    let empty = tempfile::tempdir().unwrap();
    let s = mfsbi().arg("report").arg(empty.path()).output().unwrap();
    assert!(!s.status.success());

    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { seeds: vec![4], observations: 1, metrics: vec![Metric::Nrmse], ..small(dir.path()) };
    cmd_run(&cfg).unwrap();
    let s = mfsbi().arg("report").arg(dir.path()).output().unwrap();
    assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
    let text = String::from_utf8(s.stdout).unwrap();
    let cells = parse_pivot_csv(&text).unwrap();
    assert_eq!(cells.len(), 1);
    assert_eq!(cells[0].n, 1);
    assert_eq!(cells[0].ci95, 0.0);
    assert!(text.contains("n=1: npe"));
}

#[test]
fn pivot_report_round_trips_real_rows() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<_> = cmd_run(&small(dir.path())).unwrap().rows;
    let cells = summarize(&rows).unwrap();
    let back = parse_pivot_csv(&pivot_csv(&cells).unwrap()).unwrap();
    assert_eq!(back.len(), cells.len());
    for (a, b) in cells.iter().zip(&back) {
        assert_eq!((&a.metric, a.hf_budget, &a.label, a.n), (&b.metric, b.hf_budget, &b.label, b.n));
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.ci95, b.ci95);
    }
}

#[test]
fn manifests_account_for_every_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { algorithm: Algorithm::MfNpe, lf_budget: 100, seeds: vec![0], ..small(dir.path()) };
    cmd_run(&cfg).unwrap();
    let store = mfsbi_cli::ResultsStore::open(dir.path(), &cfg).unwrap();
    let m = store.manifest(&mfsbi_cli::run::run_id(&cfg, 50, 0)).unwrap();
    assert_eq!(m.lf_calls, 100);
    assert_eq!(m.hf_calls, vec![50]);
    assert_eq!(m.rows, 4);

    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        algorithm: Algorithm::Tsnpe,
        rounds: 2,
        n_mc: 1000,
        seeds: vec![0],
        observations: 1,
        ..small(dir.path())
    };
    cmd_run(&cfg).unwrap();
    let store = mfsbi_cli::ResultsStore::open(dir.path(), &cfg).unwrap();
    let m = store.manifest(&mfsbi_cli::run::run_id(&cfg, 50, 0)).unwrap();
    assert_eq!(m.hf_calls, vec![50]);
    assert_eq!(m.rounds.len(), 2);
    assert!(m.rounds.iter().all(|r| r.n_proposal == 25));
    assert_eq!(m.rounds.iter().map(|r| r.simulator_calls).sum::<usize>(), 50);
}

#[test]
fn blob_refuses_reference_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { task: TaskId::Blob, metrics: vec![Metric::C2st], ..small(dir.path()) };
    match cmd_run(&cfg) {
        Err(RunError::Usage(msg)) => assert!(msg.contains("nltp")),
        other => panic!("expected a usage error, got {other:?}"),
    }
}
