use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lineage"));
    c.env_remove("RUST_LOG");
    c
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(store: &Path, args: &[&str]) -> Output {
    bin().arg("--store").arg(store).args(args).output().expect("spawn lineage")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(store: &Path, args: &[&str]) -> String {
    let o = run(store, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}\n{}",
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn naive_state_id(store: &Path) -> String {
    for entry in fs::read_dir(store.join("states")).unwrap() {
        let path = entry.unwrap().path();
        let doc: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        if doc["applied_actions"].as_array().is_some_and(|a| a.is_empty()) {
            return doc["id"].as_str().unwrap().to_string();
        }
    }
    panic!("no naive state stored");
}

#[test]
fn staged_pipeline_from_lattice_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let lattice = fixture("chain3.json");

    let out = ok(&store, &["induce", "--lattice", lattice.to_str().unwrap()]);
    assert!(out.contains("3 transitions"), "{out}");
    assert!(out.contains("+tile 500.0000 ms (2.00×)"), "{out}");

    let out = ok(&store, &["lift"]);
    assert!(out.contains("3 new hypotheses"), "{out}");

    let out = ok(&store, &["admit", "--sim-holdout"]);
    assert!(out.contains("admitted 3"), "{out}");

    let out = ok(
        &store,
        &["retrieve", "--case", "chain", "--language", "sim", "--platform", "sim", "--applied", "tile", "--format", "json"],
    );
    let ranked: Vec<Value> = serde_json::from_str(&out).unwrap();
    assert_eq!(ranked.len(), 3);
    assert_eq!(ranked[0]["intent"], "vectorize");

    let naive = naive_state_id(&store);
    let out = ok(&store, &["optimize", "--case", "chain", "--root", &naive]);
    assert!(out.contains("best 280.0000 ms"), "{out}");
    assert!(store.join("sessions/chain-guided.jsonl").is_file());

    let o = run(&store, &["optimize", "--case", "chain", "--root", &naive, "--budget", "0.001", "--session-id", "starved"]);
    assert_eq!(o.status.code(), Some(3), "{}", stdout(&o));

    let report_dir = dir.path().join("report");
    ok(&store, &["report", "--out", report_dir.to_str().unwrap()]);
    let md = fs::read_to_string(report_dir.join("report.md")).unwrap();
    assert!(md.contains("chain-guided: "), "{md}");
    assert!(md.contains("starved: 0 submissions, best FAIL"), "{md}");
    assert!(report_dir.join("curves/chain-guided.csv").is_file());

    // Same store, same report.
    let again = dir.path().join("again");
    ok(&store, &["report", "--out", again.to_str().unwrap()]);
    assert_eq!(md, fs::read_to_string(again.join("report.md")).unwrap());

    let out = ok(&store, &["validate-store"]);
    assert!(out.contains("ok"), "{out}");
}

#[test]
fn sim_recovers_optimum_with_skills_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["sim", "--seed", "3", "--lattices", "4", "--format", "json", "--save"]);
    let rows: Vec<Value> = serde_json::from_str(&out).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r["guided_pass"], true, "{r}");
        assert_eq!(r["ablation_pass"], false, "{r}");
    }
    let out = ok(dir.path(), &["validate-store"]);
    assert!(out.contains("ok"), "{out}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path();

    let o = run(store, &["optimize", "--case", "missing", "--root", "nothing"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(store, &["induce"]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"base_latency": 10, "actions": [{"id": "x", "effect_factor": 3.0}]}"#).unwrap();
    let o = run(store, &["induce", "--lattice", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    fs::write(store.join("skills/broken.json"), "{not json").unwrap();
    let o = run(store, &["validate-store"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("broken.json"));

    let cfg = dir.path().join("runner.toml");
    fs::write(
        &cfg,
        "[runners.liar]\nkind = \"process\"\nargv = [\"sh\", \"-c\", \"cat >/dev/null; echo not-json\"]\n",
    )
    .unwrap();
    let lattice = fixture("chain3.json");
    let o = bin()
        .arg("--store")
        .arg(dir.path().join("fresh"))
        .arg("--config")
        .arg(&cfg)
        .args(["induce", "--runner", "liar", "--lattice", lattice.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn serve_runner_matches_golden_transcripts() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/runner");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let golden: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let mut child = bin()
            .arg("serve-runner")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        child
            .stdin
            .take()
            .unwrap()
            .write_all(golden["request"].to_string().as_bytes())
            .unwrap();
        let out = child.wait_with_output().unwrap();
        assert!(out.status.success());
        let response: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(response, golden["response"], "{}", path.display());
        seen += 1;
    }
    assert!(seen >= 5);
}

#[test]
fn external_process_runner_through_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lineage.toml");
    let exe = env!("CARGO_BIN_EXE_lineage");
    fs::write(
        &cfg,
        format!(
            "[runners.proc]\nkind = \"process\"\nargv = [\"{exe}\", \"serve-runner\"]\n\n\
             [rewriters.proc]\nkind = \"process\"\nargv = [\"{exe}\", \"serve-rewriter\"]\n"
        ),
    )
    .unwrap();
    let lattice = fixture("chain3.json");
    let o = bin()
        .arg("--store")
        .arg(dir.path().join("store"))
        .arg("--config")
        .arg(&cfg)
        .args(["induce", "--runner", "proc", "--rewriter", "proc", "--lattice", lattice.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("+pipeline 280.0000 ms"), "{}", stdout(&o));
}
