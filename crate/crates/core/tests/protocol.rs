//! Runner protocol transcripts shared with external runner adapters.
//! Regenerate with `UPDATE_GOLDEN=1 cargo test -p lineage-core --test protocol`.

use std::path::PathBuf;
use std::time::Duration;

use lineage_core::gate::{
    parse_runner_request, parse_runner_response, run_external, validate, CaseSpec, ConfigEcho, GateConfig, GateError,
    Phase, ProcessRunner, RunnerRequest,
};
use lineage_core::model::{digest_state, KernelState, StateRole, ValidationStatus};
use lineage_core::sim::{case_spec, serve_runner, sim_state, LatticeSpec, SimProgram, SimRunner};
use serde_json::{json, Value};

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn request(phase: Phase, state: KernelState, case: CaseSpec, poison: bool) -> RunnerRequest {
    RunnerRequest {
        phase,
        state,
        case,
        seed: (phase == Phase::Correctness || phase == Phase::Probe).then_some(0),
        config: ConfigEcho { warmups: 25, reps: 4 },
        poison_reference: poison,
    }
}

fn transcripts() -> Vec<(&'static str, Value)> {
    let spec = LatticeSpec::chain3();
    let case = case_spec(&spec, "chain3");
    let good = sim_state(&spec, "chain3", &["tile", "vectorize"], StateRole::Candidate).unwrap();
    let bad = sim_state(&spec, "chain3", &["pipeline"], StateRole::Candidate).unwrap();
    let wrapper = KernelState::new(
        SimProgram::new(&["tile"]).wrapper().render(),
        "sim",
        "sim",
        "chain3",
        vec!["tile".into()],
        StateRole::Candidate,
    )
    .unwrap();
    let garbage = KernelState::new("not a program", "sim", "sim", "chain3", vec![], StateRole::Candidate).unwrap();
    let reqs = [
        ("compile_ok", request(Phase::Compile, good.clone(), case.clone(), false)),
        ("compile_fail", request(Phase::Compile, garbage, case.clone(), false)),
        ("correctness_ok", request(Phase::Correctness, good.clone(), case.clone(), false)),
        ("correctness_incorrect", request(Phase::Correctness, bad, case.clone(), false)),
        ("profile_samples", request(Phase::Profile, good, case.clone(), false)),
        ("probe_wrapper_poisoned", request(Phase::Probe, wrapper.clone(), case.clone(), true)),
        ("correctness_wrapper_unpoisoned", request(Phase::Correctness, wrapper, case, false)),
    ];
    let runner = SimRunner::new();
    reqs.into_iter()
        .map(|(name, req)| {
            let input = serde_json::to_vec(&req).unwrap();
            let output: Value = serde_json::from_slice(&serve_runner(&runner, &input)).unwrap();
            (name, json!({ "request": req, "response": output }))
        })
        .collect()
}

#[test]
fn sim_runner_matches_golden_transcripts() {
    let dir = golden_dir().join("runner");
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for (name, doc) in transcripts() {
        let path = dir.join(format!("{name}.json"));
        if update {
            std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap() + "\n").unwrap();
            continue;
        }
        let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let stored: Value = serde_json::from_str(&text).unwrap();
        // The stored request must parse and reproduce the stored response.
        let req = parse_runner_request(stored["request"].to_string().as_bytes()).unwrap();
        let resp = parse_runner_response(stored["response"].to_string().as_bytes()).unwrap();
        assert_eq!(serde_json::to_value(&req).unwrap(), stored["request"], "{name}: request drift");
        let replayed = serve_runner(&SimRunner::new(), stored["request"].to_string().as_bytes());
        let replayed: Value = serde_json::from_slice(&replayed).unwrap();
        assert_eq!(replayed, stored["response"], "{name}: response drift");
        assert_eq!(serde_json::to_value(&resp).unwrap(), stored["response"], "{name}");
        assert_eq!(doc, stored, "{name}: transcript drift");
    }
}

#[test]
fn malformed_request_gets_error_response() {
    let out = serve_runner(&SimRunner::new(), b"{\"phase\": \"compile\"");
    let resp = parse_runner_response(&out).unwrap();
    assert!(!resp.ok);
}

#[test]
fn state_digests_are_pinned() {
    let path = golden_dir().join("digests.json");
    let inputs = [
        ("sim-kernel v1\napply tile\n", "sim", "sim", "chain3"),
        ("__global__ void k() {}\n", "cuda", "nv-sm90", "gemm-fp16"),
        ("x", "triton", "nv-sm120", "topk"),
    ];
    let got: Vec<Value> = inputs
        .iter()
        .map(|(s, l, p, c)| json!({"source_text": s, "language": l, "platform": p, "case_id": c, "id": digest_state(s, l, p, c).unwrap()}))
        .collect();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
        return;
    }
    let stored: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(got, stored);
}

fn sh(script: &str) -> Vec<String> {
    vec!["sh".into(), "-c".into(), script.into()]
}

#[test]
fn external_runner_round_trip() {
    let spec = LatticeSpec::chain3();
    let case = case_spec(&spec, "chain3");
    let state = sim_state(&spec, "chain3", &["tile"], StateRole::Candidate).unwrap();
    let req = request(Phase::Profile, state.clone(), case.clone(), false);

    let argv = sh("cat >/dev/null; echo '{\"ok\": true, \"samples\": [2.0, 1.0, 3.0]}'");
    let resp = run_external(&req, &argv, Duration::from_secs(10)).unwrap();
    assert_eq!(resp.samples, [2.0, 1.0, 3.0]);

    let err = run_external(&req, &sh("cat >/dev/null; echo not json"), Duration::from_secs(10)).unwrap_err();
    assert!(matches!(err, GateError::Protocol(_)), "{err:?}");

    let err = run_external(&req, &sh("sleep 5"), Duration::from_millis(100)).unwrap_err();
    assert!(matches!(err, GateError::Timeout { phase: Phase::Profile }), "{err:?}");

    // A runner that fails compile with a parseable body and nonzero exit.
    let argv = sh("cat >/dev/null; echo '{\"ok\": false, \"failure_kind\": \"compile_fail\", \"detail\": \"nvcc\"}'; exit 3");
    let rec = validate(&state, &case, &GateConfig::default(), &ProcessRunner::new(argv)).unwrap();
    assert_eq!(rec.status, ValidationStatus::CompileFail);
}
