use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use sepdd::cli;
use sepdd::journal::{read_journal, write_events, EventBody, JOURNAL_FILE};

fn sepdd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sepdd")).args(args).env_remove("SEPDD_API_KEY").output().expect("spawn sepdd")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_record(o: &Output) -> Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not a JSON record ({e}): {err}"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    let text = format!(
        "{body}\n[task]\ndescription = \"Detect panel defects.\"\nrequirements = \"Print both metrics.\"\n[sandbox]\ninterpreter = \"sh {{file}}\"\nchecker = \"sh -n {{file}}\"\n"
    );
    fs::write(&p, text).unwrap();
    p
}

fn ef_run(dir: &Path) -> (PathBuf, Output) {
    let cfg = write_config(dir, "ef.toml", "run_dir = \"run\"\nfixture = \"ef\"");
    let out = sepdd(&["run", cfg.to_str().unwrap()]);
    (dir.join("run"), out)
}

#[test]
fn ef_run_then_tree_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (run, out) = ef_run(tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("Best node: 10"), "{text}");
    assert!(text.contains("0 → 1 → 6 → 10"), "{text}");

    let tree = sepdd(&["tree", run.to_str().unwrap()]);
    assert_eq!(tree.status.code(), Some(0));
    assert_eq!(stdout(&tree), cli::cmd_tree(&run).unwrap());
    assert!(stdout(&tree).starts_with("Root 0\n"));

    let json = sepdd(&["report", run.to_str().unwrap(), "--json"]);
    assert_eq!(json.status.code(), Some(0));
    let got: Value = serde_json::from_str(&stdout(&json)).unwrap();
    let want: Value = serde_json::from_str(&cli::cmd_report(&run).unwrap().0.to_json()).unwrap();
    assert_eq!(got, want);
    assert_eq!(got["best"], 10);
}

#[test]
fn rerun_into_a_used_directory_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, first) = ef_run(tmp.path());
    assert_eq!(first.status.code(), Some(0));
    let (_, again) = ef_run(tmp.path());
    assert_eq!(again.status.code(), Some(2));
    let rec = error_record(&again);
    assert_eq!(rec["exit_code"], 2);
    assert!(rec["error"].is_string() && rec["message"].is_string());
}

#[test]
fn missing_task_file_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(
        &cfg,
        "run_dir = \"run\"\nfixture = \"ef\"\n[task]\ndescription = \"d\"\nrequirements = \"r\"\ndata_description = { file = \"nowhere/data.md\" }\n",
    )
    .unwrap();
    let out = sepdd(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_record(&out)["message"].as_str().unwrap().contains("nowhere/data.md"));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn two_backends_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "run_dir = \"run\"\nfixture = \"ef\"\n[gateway]\nbase_url = \"http://127.0.0.1:9\"",
    );
    let out = sepdd(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_record(&out)["message"].as_str().unwrap().contains("more than one backend"));
}

#[test]
fn run_without_a_valid_node_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(
        &cfg,
        "run_dir = \"run\"\nfixture = \"synthetic\"\n[budget]\nmax_nodes = 3\nmax_debug_depth = 1\n[task]\ndescription = \"d\"\nrequirements = \"r\"\n[sandbox]\ninterpreter = \"true {file}\"\nchecker = \"true {file}\"\n",
    )
    .unwrap();
    let out = sepdd(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let run = tmp.path().join("run");
    let rep = sepdd(&["report", run.to_str().unwrap(), "--json"]);
    assert_eq!(rep.status.code(), Some(3));
    let v: Value = serde_json::from_str(&stdout(&rep)).unwrap();
    assert!(v["best"].is_null());
    assert_eq!(v["status"], "no_valid_node");

    let events = read_journal(&run.join(JOURNAL_FILE)).unwrap();
    let keep: Vec<_> = events.into_iter().filter(|e| !matches!(e.body, EventBody::RunFinished(_))).collect();
    write_events(&run.join(JOURNAL_FILE), &keep).unwrap();
    let partial = sepdd(&["report", run.to_str().unwrap(), "--json"]);
    assert_eq!(partial.status.code(), Some(0), "an unfinished run is still in progress");
}

#[test]
fn corrupt_or_missing_journal_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sepdd(&["tree", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_record(&out)["exit_code"], 4);

    fs::write(tmp.path().join(JOURNAL_FILE), "{\"seq\":0}\n{broken\n{}\n").unwrap();
    let out = sepdd(&["report", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn check_triggers_prints_the_fired_trigger() {
    let tmp = tempfile::tempdir().unwrap();
    let ind = tmp.path().join("ind.json");
    fs::write(
        &ind,
        r#"{"state": {"metric_floor": 0.4, "known_labels": ["scratch"], "last_evolution_at": "2025-01-01T00:00:00Z",
            "period_secs": 2592000},
            "observed": {"metric": 0.52, "labels": ["scratch", "dent"]}}"#,
    )
    .unwrap();
    let out = sepdd(&["check-triggers", ind.to_str().unwrap(), "--now", "2025-01-02T00:00:00Z"]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["fired"], true);
    assert_eq!(v["trigger"]["kind"], "label_evolution");
    assert_eq!(v["trigger"]["added"], serde_json::json!(["dent"]));

    fs::write(
        &ind,
        r#"{"state": {"metric_floor": 0.4, "last_evolution_at": "2025-01-01T00:00:00Z", "period_secs": 2592000}}"#,
    )
    .unwrap();
    let quiet = sepdd(&["check-triggers", ind.to_str().unwrap(), "--now", "2025-01-02T00:00:00Z"]);
    let v: Value = serde_json::from_str(&stdout(&quiet)).unwrap();
    assert_eq!(v["fired"], false);

    fs::write(
        &ind,
        r#"{"state": {"metric_floor": 7.0, "last_evolution_at": "2025-01-01T00:00:00Z", "period_secs": 1}}"#,
    )
    .unwrap();
    let bad = sepdd(&["check-triggers", ind.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn recorded_run_plays_back_to_the_same_result() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "rec.toml",
        "run_dir = \"rec\"\nfixture = \"synthetic\"\nseed = 4\nrecord = true\n[budget]\nmax_nodes = 6",
    );
    let out = sepdd(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let table = tmp.path().join("table");
    let conv = sepdd(&["replay-record", tmp.path().join("rec/recordings").to_str().unwrap(), table.to_str().unwrap()]);
    assert_eq!(conv.status.code(), Some(0));
    assert!(stdout(&conv).starts_with("wrote "));

    let play = write_config(
        tmp.path(),
        "play.toml",
        "run_dir = \"play\"\nseed = 4\nplayback = \"table\"\n[budget]\nmax_nodes = 6",
    );
    let out = sepdd(&["run", play.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let a = cli::cmd_report(&tmp.path().join("rec")).unwrap().0;
    let b = cli::cmd_report(&tmp.path().join("play")).unwrap().0;
    assert_eq!(a.best, b.best);
    assert_eq!(a.primary_edge, b.primary_edge);
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(cli::cmd_tree(&tmp.path().join("rec")).unwrap(), cli::cmd_tree(&tmp.path().join("play")).unwrap());
}

#[test]
fn resume_after_a_torn_journal() {
    let tmp = tempfile::tempdir().unwrap();
    let (run, _) = ef_run(tmp.path());
    let path = run.join(JOURNAL_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let cut = text.len() * 2 / 3;
    fs::write(&path, &text[..cut]).unwrap();
    let cfg = tmp.path().join("ef.toml");
    let out = sepdd(&["resume", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("Best node: 10"));

    let changed = sepdd(&["resume", cfg.to_str().unwrap(), "--set", "strategy.k=2"]);
    assert_eq!(changed.status.code(), Some(0), "a finished run is not re-hashed");
}

#[test]
fn indicator_without_trigger_skips_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let ind = tmp.path().join("ind.toml");
    fs::write(&ind, "[state]\nmetric_floor = 0.4\nlast_evolution_at = \"2999-01-01T00:00:00Z\"\nperiod_secs = 60\n")
        .unwrap();
    let cfg = write_config(tmp.path(), "ef.toml", "run_dir = \"run\"\nfixture = \"ef\"");
    let out = sepdd(&["run", cfg.to_str().unwrap(), "--indicator", ind.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("no trigger fired"));
    assert!(!tmp.path().join("run").exists());
}
