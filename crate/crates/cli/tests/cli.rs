//! The `use-engine` binary end to end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn engine<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_use-engine"))
        .args(args)
        .env_remove("USE_ENGINE_API_KEY")
        .output()
        .unwrap()
}

fn fx(rel: &str) -> String {
    fixtures().join(rel).to_string_lossy().into_owned()
}

fn scripted(name: &str) -> String {
    format!("scripted:{}", fx(&format!("scripts/{name}")))
}

fn run_divide(out: &Path, script: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "run".to_string(),
        "--manifest".into(),
        fx("tasks/calc-divide.toml"),
        "--backend".into(),
        scripted(script),
        "--out-dir".into(),
        out.to_string_lossy().into_owned(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    engine(&args)
}

fn trajectory_lines(out: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(out.join("calc-divide/run-1/trajectory.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn eval_exit_codes() {
    let manifest = fx("tasks/calc-divide.toml");
    let gold = engine(&["eval", "--manifest", &manifest, "--solution", &fx("gold/calc-divide.diff")]);
    assert_eq!(gold.status.code(), Some(0), "{}", stderr(&gold));
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.diff");
    fs::write(&empty, "").unwrap();
    let out = engine(&["eval", "--manifest", &manifest, "--solution", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let bad = dir.path().join("bad.diff");
    fs::write(&bad, "--- a/calc/ops.py\n+++ b/calc/ops.py\n@@ -1,3 +1,3 @@\n-x\n").unwrap();
    let out = engine(&["eval", "--manifest", &manifest, "--solution", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("malformed diff"));
}

#[test]
fn eval_json_verdict() {
    let out = engine(&[
        "eval",
        "--manifest",
        &fx("tasks/calc-clamp-tests.toml"),
        "--solution",
        &fx("variants/calc-clamp-tests-partial.diff"),
        "--json",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["metric"]["criterion"], "method-coverage");
    assert_eq!(v["metric"]["fraction"], 0.6);
}

#[test]
fn run_writes_the_artifact_layout_and_replays() {
    let out = tempfile::tempdir().unwrap();
    let res = run_divide(out.path(), "calc-divide-dynamic.toml", &[]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    let dir = out.path().join("calc-divide/run-1");
    for f in ["trajectory.jsonl", "solution.diff", "verdict.json", "ledger.json", "metadata.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let verdict: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("verdict.json")).unwrap()).unwrap();
    assert_eq!(verdict["resolved"], true);
    let lines = trajectory_lines(out.path());
    let replay = engine(&["replay", dir.join("trajectory.jsonl").to_str().unwrap()]);
    assert_eq!(replay.status.code(), Some(0));
    let text = String::from_utf8_lossy(&replay.stdout);
    let steps = text.lines().filter(|l| l.starts_with('[')).count();
    assert_eq!(steps, lines.len() - 2);
    assert!(text.contains("delta: diffs +[d1]; records +1; reproducer = d1"));

    let solution = dir.join("solution.diff");
    let again = engine(&["eval", "--manifest", &fx("tasks/calc-divide.toml"), "--solution", solution.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(0));
}

#[test]
fn replay_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let header = r#"{"record":"header","task_id":"t","model":"m","max_rounds":20,"mode":"dynamic","enabled":["Terminate"]}"#;
    let only = dir.path().join("only.jsonl");
    fs::write(&only, format!("{header}\n")).unwrap();
    let out = engine(&["replay", only.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1);

    let broken = dir.path().join("broken.jsonl");
    fs::write(&broken, format!("{header}\n{{not json\n")).unwrap();
    let out = engine(&["replay", broken.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn identical_runs_give_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for out in [&a, &b] {
        assert_eq!(run_divide(out.path(), "calc-divide-review-revise.toml", &[]).status.code(), Some(0));
    }
    for f in ["trajectory.jsonl", "solution.diff", "verdict.json", "ledger.json"] {
        let read = |d: &tempfile::TempDir| fs::read(d.path().join("calc-divide/run-1").join(f)).unwrap();
        assert_eq!(read(&a), read(&b), "{f}");
    }
}

#[test]
fn max_rounds_flag_overrides_the_default() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run_divide(out.path(), "never-terminate.toml", &["--max-rounds", "5"]).status.code(), Some(0));
    let lines = trajectory_lines(out.path());
    assert_eq!(lines[0]["max_rounds"], 5);
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[6]["kind"], "forced-selection");
}

#[test]
fn disabled_action_is_absent_from_the_trajectory() {
    let out = tempfile::tempdir().unwrap();
    let res = run_divide(out.path(), "calc-divide-ablation.toml", &["--disable-action", "ExecuteTests"]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    let lines = trajectory_lines(out.path());
    assert!(lines.iter().all(|l| l["action"] != "ExecuteTests"));
    assert_eq!(lines.last().unwrap()["record"], "terminal");
}

#[test]
fn configuration_errors_exit_with_two() {
    let out = tempfile::tempdir().unwrap();
    for extra in [
        &["--static", "nope"][..],
        &["--disable-action", "Terminate"],
        &["--disable-action", "Frobnicate"],
        &["--max-rounds", "0"],
        &["--static", "swe", "--disable-action", "ReviewPatch"],
    ] {
        assert_eq!(run_divide(out.path(), "calc-divide-dynamic.toml", extra).status.code(), Some(2), "{extra:?}");
    }
    let res = engine(&["run", "--manifest", &fx("tasks/calc-divide.toml"), "--backend", "scripted:/nonexistent.toml"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn exhausted_script_is_an_engine_error() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("short.toml");
    fs::write(&script, "[[reply]]\ntext = \"I am not sure.\"\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = engine(&[
        "run".to_string(),
        "--manifest".into(),
        fx("tasks/calc-divide.toml"),
        "--backend".into(),
        format!("scripted:{}", script.display()),
        "--out-dir".into(),
        out_dir.to_string_lossy().into_owned(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let lines = trajectory_lines(&out_dir);
    assert_eq!(lines.last().unwrap()["kind"], "error");
}

#[test]
fn parallel_runs_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = dir.path().join("tasks");
    fs::create_dir(&tasks).unwrap();
    for id in ["calc-divide", "calc-divide-partial"] {
        let text = fs::read_to_string(fixtures().join(format!("tasks/{id}.toml"))).unwrap();
        let text = text.replace("\"../", &format!("\"{}/", fixtures().display()));
        fs::write(tasks.join(format!("{id}.toml")), text).unwrap();
    }
    let out = dir.path().join("out");
    let res = engine(&[
        "run".to_string(),
        "--manifest".into(),
        tasks.to_string_lossy().into_owned(),
        "--backend".into(),
        scripted("calc-divide-dynamic.toml"),
        "--parallel".into(),
        "2".into(),
        "--runs".into(),
        "2".into(),
        "--out-dir".into(),
        out.to_string_lossy().into_owned(),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    assert_eq!(String::from_utf8_lossy(&res.stdout).lines().count(), 4);
    for id in ["calc-divide", "calc-divide-partial"] {
        for n in [1, 2] {
            assert!(out.join(format!("{id}/run-{n}/verdict.json")).is_file());
        }
    }
    let stats = engine(&["stats", out.to_str().unwrap(), "--json"]);
    assert_eq!(stats.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(report["runs"], 4);
    assert_eq!(report["histograms"]["program-repair"]["1"]["Reproduction"], 2);
    let all = report["pass_at_k"].as_array().unwrap().iter().filter(|r| r["group"] == "all").count();
    assert_eq!(all, 2);
    let again = engine(&["stats", out.to_str().unwrap(), "--json"]);
    assert_eq!(stats.stdout, again.stdout);
    assert_eq!(engine(&["stats", dir.path().join("nothing").to_str().unwrap()]).status.code(), Some(2));
}
