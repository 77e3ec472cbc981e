mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use iterflow::{Action, CacheStore, OperatorNode, WorkflowSpec};

use common::{simulated, tree_digest, write_sources};

fn iterflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iterflow"))
        .args(args)
        .current_dir(dir)
        .env_remove("ITERFLOW_CACHE")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn diamond() -> WorkflowSpec {
    WorkflowSpec::new(
        vec![
            simulated("a", "data-preprocessing", &[], 4.0, 100),
            simulated("b", "ml", &["a"], 3.0, 100),
            simulated("c", "ml", &["a"], 2.0, 100),
            simulated("d", "evaluation", &["b", "c"], 1.0, 100),
        ],
        vec!["d".into()],
    )
    .unwrap()
}

fn workspace(spec: &WorkflowSpec) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_sources(spec, dir.path());
    fs::write(dir.path().join("wf.json"), spec.to_json()).unwrap();
    dir
}

const SIM: [&str; 4] = ["--spec", "wf.json", "--clock", "simulated"];

fn with<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend(SIM);
    v.extend(extra);
    v
}

#[test]
fn run_cold_cache_succeeds_and_prints_report() {
    let ws = workspace(&diamond());
    let out = iterflow(ws.path(), &with("run", &[]));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("iteration 0"));
    assert!(text.contains("compute 10.000 s"));
    assert!(ws.path().join(".iterflow/manifest.json").exists());
    assert!(ws.path().join(".iterflow/runs.log").exists());
}

#[test]
fn cycle_is_a_usage_error_naming_the_cycle() {
    let mut spec = diamond();
    spec.nodes[1].parents.push("d".into());
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("wf.json"), spec.to_json()).unwrap();
    let out = iterflow(dir.path(), &with("run", &[]));
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(
        err.contains("cycle") && err.contains('b') && err.contains('d'),
        "{err}"
    );
}

#[test]
fn missing_spec_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = iterflow(dir.path(), &["plan", "--spec", "nope.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join(".iterflow").exists());
}

#[test]
fn failing_operator_exits_one_and_reports_skips() {
    let spec = WorkflowSpec::new(
        vec![
            OperatorNode {
                name: "boom".into(),
                kind: "ml".into(),
                action: Action::Command {
                    argv: vec!["sh".into(), "-c".into(), "echo broken >&2; exit 4".into()],
                    inputs: vec![],
                    output: "boom.out".into(),
                    estimated_seconds: None,
                },
                parents: vec![],
                sources: vec!["src/boom.txt".into()],
                env_fingerprint: None,
            },
            simulated("after", "ml", &["boom"], 1.0, 1),
        ],
        vec!["after".into()],
    )
    .unwrap();
    let ws = workspace(&spec);
    let out = iterflow(ws.path(), &["run", "--spec", "wf.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("skipped"));
    let err = stderr(&out);
    assert!(
        err.contains("boom") && err.contains("exit code 4") && err.contains("broken"),
        "{err}"
    );
}

#[test]
fn plan_cold_then_warm() {
    let ws = workspace(&diamond());
    let cold = iterflow(ws.path(), &with("plan", &["--json"]));
    assert_eq!(cold.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_slice(&cold.stdout).unwrap();
    for n in ["a", "b", "c", "d"] {
        assert_eq!(doc["states"][n], "compute");
    }
    assert_eq!(doc["total_cost_seconds"], 10.0);

    assert_eq!(
        iterflow(ws.path(), &with("run", &[])).status.code(),
        Some(0)
    );
    let warm = iterflow(ws.path(), &with("plan", &["--json"]));
    let doc: serde_json::Value = serde_json::from_slice(&warm.stdout).unwrap();
    assert_eq!(doc["states"]["d"], "load");
    for n in ["a", "b", "c"] {
        assert_eq!(doc["states"][n], "prune");
    }
    assert!(stdout(&iterflow(ws.path(), &with("plan", &[]))).contains("total cost"));
}

#[test]
fn diff_reports_added_changed_and_nothing() {
    let mut spec = diamond();
    let ws = workspace(&spec);
    let first = stdout(&iterflow(ws.path(), &with("diff", &[])));
    assert_eq!(first.matches("added").count(), 4, "{first}");

    iterflow(ws.path(), &with("run", &[]));
    assert_eq!(
        stdout(&iterflow(ws.path(), &with("diff", &[]))),
        "no changes\n"
    );

    spec.nodes[2].env_fingerprint = Some("v2".into());
    fs::write(ws.path().join("wf.json"), spec.to_json()).unwrap();
    let out = iterflow(ws.path(), &with("diff", &["--json"]));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["changed"], serde_json::json!(["c", "d"]));
    assert_eq!(doc["unchanged"], serde_json::json!(["a", "b"]));
}

#[test]
fn read_only_commands_leave_cache_identical() {
    let mut spec = diamond();
    let ws = workspace(&spec);
    iterflow(ws.path(), &with("run", &[]));
    spec.nodes[0].env_fingerprint = Some("v2".into());
    fs::write(ws.path().join("wf.json"), spec.to_json()).unwrap();
    let cache = ws.path().join(".iterflow");
    let before = tree_digest(&cache);
    for args in [
        with("plan", &[]),
        with("plan", &["--json"]),
        with("diff", &[]),
        with("diff", &["--json"]),
        with("run", &["--dry-run"]),
        vec!["cache", "ls"],
        vec!["cache", "ls", "--json"],
    ] {
        let out = iterflow(ws.path(), &args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", stderr(&out));
        assert_eq!(tree_digest(&cache), before, "{args:?} modified the cache");
    }
}

#[test]
fn cache_ls_and_gc() {
    let mut spec = diamond();
    let ws = workspace(&spec);
    let empty = stdout(&iterflow(ws.path(), &["cache", "ls"]));
    assert!(empty.contains("0 entries"), "{empty}");

    iterflow(ws.path(), &with("run", &[]));
    spec.nodes[3].env_fingerprint = Some("v2".into());
    fs::write(ws.path().join("wf.json"), spec.to_json()).unwrap();
    iterflow(ws.path(), &with("run", &[]));
    let listed = stdout(&iterflow(ws.path(), &["cache", "ls"]));
    assert!(listed.contains("5 entries"), "{listed}");

    let gc = iterflow(ws.path(), &["cache", "gc", "--keep-latest", "--json"]);
    assert_eq!(gc.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&gc.stdout).unwrap();
    assert_eq!(report["removed_entries"].as_array().unwrap().len(), 1);
    assert!(stdout(&iterflow(ws.path(), &["cache", "ls"])).contains("4 entries"));
}

#[test]
fn gc_on_locked_cache_exits_three() {
    let ws = workspace(&diamond());
    let _held = CacheStore::open(ws.path().join(".iterflow")).unwrap();
    let out = iterflow(ws.path(), &["cache", "gc"]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr(&out);
    assert!(
        err.contains(&format!("pid {}", std::process::id())),
        "{err}"
    );
    assert_eq!(
        iterflow(ws.path(), &with("run", &[])).status.code(),
        Some(3)
    );
}

#[test]
fn cache_root_from_environment_and_config_file() {
    let ws = workspace(&diamond());
    let out = Command::new(env!("CARGO_BIN_EXE_iterflow"))
        .args(with("run", &[]))
        .current_dir(ws.path())
        .env("ITERFLOW_CACHE", "env-cache")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(ws.path().join("env-cache/manifest.json").exists());

    fs::write(
        ws.path().join("iterflow.toml"),
        "spec = \"wf.json\"\ncache = \"toml-cache\"\nclock = \"simulated\"\n",
    )
    .unwrap();
    let out = iterflow(ws.path(), &["run", "--config", "iterflow.toml"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(ws.path().join("toml-cache/manifest.json").exists());

    fs::write(ws.path().join("bad.toml"), "colour = 3\n").unwrap();
    assert_eq!(
        iterflow(ws.path(), &["plan", "--config", "bad.toml"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn simulate_prints_table_and_writes_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = iterflow(
        dir.path(),
        &[
            "simulate",
            "--scenario",
            "classification",
            "-n",
            "4",
            "--seed",
            "3",
            "--data-out",
            "curves.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("iteration\tkind\tpolicy\titeration_seconds\tcumulative_seconds\n"));
    // Three default policies, five rows each (cold run plus four edits).
    assert_eq!(
        text.lines()
            .filter(|l| l.contains("\tmaterialize-none\t"))
            .count(),
        5
    );
    let csv = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 15);

    let bad = iterflow(dir.path(), &["simulate", "--scenario", "nope"]);
    assert_eq!(bad.status.code(), Some(2));
}
