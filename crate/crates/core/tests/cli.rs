//! End-to-end runs of the `tamcl` binary in scratch directories.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::small_task;
use tamcl::config::{ExperimentConfig, TaskEntry};
use tamcl::data::{SuiteSpec, MANIFEST_FILE};
use tamcl::trainer::{ExperimentResult, Method};

fn tamcl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tamcl"))
        .args(args)
        .current_dir(dir)
        .env("TAMCL_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every file under `dir`, relative path and bytes, sorted by path.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Writes a two-task small suite and an experiment config over it.
fn small_setup(dir: &Path, method: Method) {
    let suite = SuiteSpec {
        seed: 4,
        tasks: vec![small_task("alpha", 3, 1, false), small_task("beta", 2, 2, true)],
    };
    fs::write(dir.join("suite.toml"), suite.to_toml().unwrap()).unwrap();
    ok(&tamcl(dir, &["generate", "--config", "suite.toml", "--out", "data"]));
    let mut config = ExperimentConfig {
        method,
        tasks: vec![TaskEntry::named("alpha"), TaskEntry::named("beta")],
        ..ExperimentConfig::default()
    };
    config.model.depth = 1;
    config.model.hidden = 8;
    config.model.heads = 2;
    config.optimizer.lr = 1e-3;
    config.training.epochs = 1;
    fs::write(dir.join("exp.toml"), config.to_toml().unwrap()).unwrap();
}

#[test]
fn generate_writes_the_default_suite_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    ok(&tamcl(dir.path(), &["generate", "--out", "one"]));
    ok(&tamcl(dir.path(), &["generate", "--out", "two"]));
    let one = dir.path().join("one");
    let dirs: Vec<_> = fs::read_dir(&one)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 4);
    for name in ["entail3", "pairs2", "qa7", "path4"] {
        assert!(one.join(name).join("train.bin").is_file(), "{name}");
        assert!(one.join(name).join("test.bin").is_file(), "{name}");
    }
    assert!(one.join(MANIFEST_FILE).is_file());
    assert_eq!(tree(&one), tree(&dir.path().join("two")));

    ok(&tamcl(dir.path(), &["generate", "--out", "three", "--seed", "5"]));
    assert_ne!(tree(&one), tree(&dir.path().join("three")));
}

#[test]
fn bad_suite_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut suite = SuiteSpec::default_suite();
    suite.tasks[2].label_count = 1;
    fs::write(dir.path().join("bad.toml"), suite.to_toml().unwrap()).unwrap();
    let out = tamcl(dir.path(), &["generate", "--config", "bad.toml", "--out", "data"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("qa7.label_count"), "{}", stderr(&out));

    fs::write(dir.path().join("typo.toml"), "seed = 1\nbogus = 2\n").unwrap();
    let out = tamcl(dir.path(), &["generate", "--config", "typo.toml"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("bogus"), "{}", stderr(&out));
}

#[test]
fn finetune_on_two_tasks_gives_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    small_setup(dir.path(), Method::Finetune);
    ok(&tamcl(dir.path(), &["train", "--config", "exp.toml", "--out", "run"]));
    let run = dir.path().join("run");
    let r: ExperimentResult = serde_json::from_str(&fs::read_to_string(run.join("result.json")).unwrap()).unwrap();
    assert_eq!(r.config.method, Method::Finetune);
    assert_eq!(r.accuracy.rows.len(), 2);
    assert_eq!(r.accuracy.rows[1].len(), 2);
    for f in ["model.ckpt", "timing.json", "config.toml"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(!run.join("buffer.bin").exists(), "finetune keeps no replay buffer");

    // evaluating the checkpoint reproduces the final row
    let out = tamcl(dir.path(), &["evaluate", "--config", "exp.toml", "--checkpoint", "run/model.ckpt", "--out", "eval"]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let scores: Vec<f64> = stdout.lines().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    for (s, a) in scores.iter().zip(&r.accuracy.rows[1]) {
        assert!((s - a).abs() < 5e-5, "{s} vs {a}");
    }
    assert!(dir.path().join("eval/evaluation.json").is_file());
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    small_setup(dir.path(), Method::Finetune);
    ok(&tamcl(dir.path(), &["train", "--config", "exp.toml", "--method", "er", "--seed", "9", "--out", "er"]));
    let r: ExperimentResult =
        serde_json::from_str(&fs::read_to_string(dir.path().join("er/result.json")).unwrap()).unwrap();
    assert_eq!(r.config.method, Method::Er);
    assert_eq!(r.config.seed, 9);
    assert!(dir.path().join("er/buffer.bin").is_file());
    let echo = ExperimentConfig::load(&dir.path().join("er/config.toml")).unwrap();
    assert_eq!(echo.method, Method::Er);
}

#[test]
fn tamcl_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    small_setup(dir.path(), Method::Tamcl);
    let before = tree(&dir.path().join("data"));
    ok(&tamcl(dir.path(), &["train", "--config", "exp.toml", "--out", "a"]));
    ok(&tamcl(dir.path(), &["train", "--config", "exp.toml", "--out", "b"]));
    let read = |d: &str| fs::read(dir.path().join(d).join("result.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_eq!(
        fs::read(dir.path().join("a/model.ckpt")).unwrap(),
        fs::read(dir.path().join("b/model.ckpt")).unwrap()
    );
    assert_eq!(tree(&dir.path().join("data")), before, "datasets untouched");
}

#[test]
fn missing_dataset_names_the_task() {
    let dir = tempfile::tempdir().unwrap();
    small_setup(dir.path(), Method::Finetune);
    let mut config = ExperimentConfig::load(&dir.path().join("exp.toml")).unwrap();
    config.tasks.push(TaskEntry::named("ghost"));
    fs::write(dir.path().join("ghost.toml"), config.to_toml().unwrap()).unwrap();
    let out = tamcl(dir.path(), &["train", "--config", "ghost.toml", "--out", "g"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("ghost"), "{err}");
    assert!(err.contains("train.bin"), "{err}");
}

#[test]
fn report_tables_and_schema_check() {
    let dir = tempfile::tempdir().unwrap();
    small_setup(dir.path(), Method::Finetune);
    ok(&tamcl(dir.path(), &["train", "--config", "exp.toml", "--out", "ft"]));
    ok(&tamcl(dir.path(), &["train", "--config", "exp.toml", "--method", "tamcl", "--out", "tc"]));

    ok(&tamcl(dir.path(), &["report", "ft/result.json", "--out", "single"]));
    let single = fs::read_to_string(dir.path().join("single/report.csv")).unwrap();
    assert_eq!(single.lines().count(), 3, "{single}");

    let out = tamcl(dir.path(), &["report", "ft/result.json", "tc/result.json", "--out", "both"]);
    ok(&out);
    let csv = fs::read_to_string(dir.path().join("both/report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,seed,status,alpha,beta,mean_forgetting");
    assert!(lines[1].starts_with("finetune,0,complete,"));
    assert!(lines[2].starts_with("tamcl,0,complete,"));
    assert!(lines[3].starts_with("difficulty,,,"));
    // earlier task: "forgetting% (accuracy)"; last task: accuracy only
    let cell = lines[1].split(',').nth(3).unwrap();
    let (rate, acc) = cell.split_once("% (").expect("forgetting cell");
    rate.parse::<f64>().unwrap();
    acc.strip_suffix(')').unwrap().parse::<f64>().unwrap();
    lines[1].split(',').nth(4).unwrap().parse::<f64>().unwrap();
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("finetune") && table.contains("tamcl"), "{table}");
    assert!(dir.path().join("both/report.json").is_file());
    assert!(dir.path().join("both/01-finetune-seed0-accuracy.csv").is_file());

    let text = fs::read_to_string(dir.path().join("ft/result.json")).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["schema_version"] = 99.into();
    fs::write(dir.path().join("old.json"), value.to_string()).unwrap();
    let out = tamcl(dir.path(), &["report", "old.json", "--out", "x"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("99") && err.contains("version 1"), "{err}");
}
