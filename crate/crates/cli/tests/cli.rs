use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use afin::factor_model::is_conjugate;
use afin::network::{Afin, ModelConfig};
use afin::training::load_weights;
use afin_cli::commands::read_tasks;
use serde_json::Value;

fn afin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afin"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Small training configuration so each run takes a second or two.
fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.json");
    fs::write(
        &p,
        r#"{
            "seed": 4,
            "train": {"steps": 6, "micro_batch": 2, "accumulation": 2},
            "eval": {"reference_samples": 400, "mcmc_reference_iterations": 3000, "slices": 8}
        }"#,
    )
    .unwrap();
    p
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn simulate_zero_tasks_writes_an_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    ok(&afin(
        dir.path(),
        &["simulate", "--count", "0", "--out", "t.jsonl"],
    ));
    assert_eq!(fs::read(dir.path().join("t.jsonl")).unwrap(), b"");
}

#[test]
fn simulate_is_deterministic_in_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, out: &str| {
        ok(&afin(
            dir.path(),
            &["simulate", "--count", "25", "--seed", seed, "--out", out],
        ))
    };
    let summary = run("3", "a.jsonl");
    run("3", "b.jsonl");
    run("4", "c.jsonl");
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
    assert!(summary.contains("25 tasks") && summary.contains("seed 3"));
    for (i, v) in lines(&dir.path().join("a.jsonl")).iter().enumerate() {
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["seed"], 3);
        assert_eq!(v["task_id"], i);
    }
}

#[test]
fn toy_profile_simulates_only_closed_form_tasks() {
    let dir = tempfile::tempdir().unwrap();
    ok(&afin(
        dir.path(),
        &[
            "simulate",
            "--profile",
            "toy",
            "--count",
            "300",
            "--out",
            "t.jsonl",
        ],
    ));
    let tasks = read_tasks(&dir.path().join("t.jsonl")).unwrap();
    assert_eq!(tasks.len(), 300);
    assert!(tasks
        .iter()
        .all(|(_, t)| is_conjugate(t) && t.d <= 3 && t.n() <= 8));
    ok(&afin(
        dir.path(),
        &[
            "simulate",
            "--profile",
            "paper-default",
            "--count",
            "300",
            "--out",
            "p.jsonl",
        ],
    ));
    let tasks = read_tasks(&dir.path().join("p.jsonl")).unwrap();
    assert!(tasks.iter().any(|(_, t)| !is_conjugate(t)));
}

#[test]
fn zero_steps_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    ok(&afin(
        dir.path(),
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--steps",
            "0",
            "--seed",
            "12",
            "--out-dir",
            "run",
        ],
    ));
    let (_, init) = Afin::build(ModelConfig::toy(), 12).unwrap();
    let saved = load_weights(dir.path().join("run/checkpoint.afin"), &init, false).unwrap();
    for pid in 0..init.len() {
        assert_eq!(saved.value(pid), init.value(pid));
    }
    let csv = fs::read_to_string(dir.path().join("run/train_metrics.csv")).unwrap();
    assert_eq!(csv.trim(), "schema_version,seed,step,loss,lr,wallclock_s");
    // the flag beats the file's seed
    let echoed: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/run_config.json")).unwrap())
            .unwrap();
    assert_eq!(echoed["seed"], 12);
}

#[test]
fn resumed_training_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    ok(&afin(
        dir.path(),
        &["train", "--config", cfg, "--out-dir", "full"],
    ));
    ok(&afin(
        dir.path(),
        &[
            "train",
            "--config",
            cfg,
            "--out-dir",
            "split",
            "--steps",
            "2",
        ],
    ));
    ok(&afin(
        dir.path(),
        &["train", "--config", cfg, "--out-dir", "split", "--resume"],
    ));
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("full/checkpoint.afin"), read("split/checkpoint.afin"));

    let rows = |p: &str| -> Vec<Vec<String>> {
        csv::Reader::from_path(dir.path().join(p))
            .unwrap()
            .records()
            .map(|r| r.unwrap().iter().take(5).map(str::to_string).collect())
            .collect()
    };
    let (full, split) = (
        rows("full/train_metrics.csv"),
        rows("split/train_metrics.csv"),
    );
    assert_eq!(full.len(), 6);
    assert_eq!(full, split);
}

#[test]
fn resume_without_a_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = afin(dir.path(), &["train", "--resume", "--out-dir", "none"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_reports_every_method_and_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    ok(&afin(
        dir.path(),
        &["train", "--config", cfg, "--out-dir", "run"],
    ));
    ok(&afin(
        dir.path(),
        &[
            "simulate",
            "--config",
            cfg,
            "--count",
            "3",
            "--out",
            "tasks.jsonl",
        ],
    ));
    let stdout = ok(&afin(
        dir.path(),
        &[
            "eval",
            "--config",
            cfg,
            "--out-dir",
            "run",
            "--tasks",
            "tasks.jsonl",
            "--budgets",
            "50,100",
        ],
    ));
    let summary: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(summary["seed"], 4);
    let rows = lines(&dir.path().join("run/eval_report.jsonl"));
    assert_eq!(rows.len(), 3 * 4 * 2);
    for r in &rows {
        assert_eq!(r["schema_version"], 1);
        assert_eq!(r["seed"], 4);
        if r["method"] == "oracle" {
            assert_eq!((r["m1"].as_f64(), r["m2"].as_f64()), (Some(0.0), Some(0.0)));
        }
    }
    let agg = fs::read_to_string(dir.path().join("run/eval_aggregate.csv")).unwrap();
    let mut agg_lines = agg.lines();
    assert_eq!(
        agg_lines.next().unwrap(),
        "schema_version,seed,method,budget,tasks,m1,m2,sw2,pareto_k,wallclock_s"
    );
    assert_eq!(agg_lines.count(), 8);
}

#[test]
fn eval_skips_the_oracle_on_non_conjugate_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    ok(&afin(
        dir.path(),
        &[
            "simulate",
            "--config",
            cfg,
            "--profile",
            "paper-default",
            "--count",
            "400",
            "--out",
            "all.jsonl",
        ],
    ));
    // keep two small tasks of each kind
    let tasks = read_tasks(&dir.path().join("all.jsonl")).unwrap();
    let mut keep = Vec::new();
    for conj in [true, false] {
        keep.extend(
            tasks
                .iter()
                .filter(|(_, t)| is_conjugate(t) == conj && t.d <= 4 && t.n() <= 32)
                .take(2),
        );
    }
    assert_eq!(keep.len(), 4);
    let body: String = keep.iter().map(|(_, t)| t.to_json() + "\n").collect();
    fs::write(dir.path().join("mixed.jsonl"), body).unwrap();

    let out = afin(
        dir.path(),
        &[
            "eval",
            "--config",
            cfg,
            "--tasks",
            "mixed.jsonl",
            "--methods",
            "afin,oracle",
            "--budgets",
            "100",
            "--out-dir",
            "ev",
        ],
    );
    ok(&out);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.matches("skipping method oracle").count(), 2);
    let rows = lines(&dir.path().join("ev/eval_report.jsonl"));
    assert_eq!(rows.len(), 4 * 2 - 2);
    assert_eq!(
        rows.iter().filter(|r| r["reference"] == "mcmc-rwm").count(),
        2
    );
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&afin(
        dir.path(),
        &[
            "gradcheck",
            "--probes",
            "60",
            "--tasks",
            "2",
            "--out-dir",
            "gc",
        ],
    ));
    let reports: Vec<Value> = stdout
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert_eq!(r["passed"], true);
        assert!(r["max_rel_err"].as_f64().unwrap() < 1e-4);
    }
    let bad = afin(
        dir.path(),
        &[
            "gradcheck",
            "--variant",
            "gaussian",
            "--probes",
            "10",
            "--tasks",
            "1",
            "--corrupt-gradient",
            "--out-dir",
            "gc",
        ],
    );
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("worst offender"));
}

#[test]
fn oracle_check_agrees_with_quadrature() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&afin(
        dir.path(),
        &[
            "oracle-check",
            "--tasks",
            "20",
            "--mcmc-iterations",
            "0",
            "--out-dir",
            "oc",
            "--threads",
            "1",
        ],
    ));
    let report: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["max_quadrature_err"].as_f64().unwrap() < 1e-6);
    let full: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("oc/oracle_check.json")).unwrap())
            .unwrap();
    assert_eq!(full["checks"].as_array().unwrap().len(), 20);
}

#[test]
fn bad_configuration_exits_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"model": {"channels": 0}}"#).unwrap();
    let out = afin(
        dir.path(),
        &["train", "--config", "bad.json", "--out-dir", "never"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("never/checkpoint.afin").exists());
    let out = afin(
        dir.path(),
        &["eval", "--methods", "nuts", "--tasks", "x.jsonl"],
    );
    assert_ne!(out.status.code(), Some(0));
}
