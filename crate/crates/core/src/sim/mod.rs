//! A deterministic synthetic kernel domain: a precondition lattice with
//! multiplicative latency effects, plus runner, rewriter and lifter
//! implementations over it and brute-force oracles.

mod lattice;
mod lifter;
mod recovery;
pub mod program;

use std::collections::BTreeMap;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lattice::{brute_force_best, generate_random_lattice, LatticeAction, LatticeSpec, SimOutcome};
pub use lifter::{serve_lifter, SimLifter};
pub use program::SimProgram;
pub use recovery::{build_library, run_recovery, BuiltLibrary, RecoveryConfig, RecoveryError, RecoveryOutcome};

use crate::gate::{CaseSpec, GateError, Phase, Runner, RunnerFailure, RunnerRequest, RunnerResponse};
use crate::model::{digest_fields, KernelState, ModelError, StateRole};
use crate::rewrite::{RewriteError, RewriteMode, RewriteRequest, RewriteResponse, Rewriter, TokenUsage};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown action {0}")]
    InvalidAction(String),
    #[error("precondition graph has a cycle")]
    Cyclic,
    #[error("invalid lattice: {0}")]
    InvalidSpec(String),
    #[error("sim program: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Case definition whose payload carries the lattice.
pub fn case_spec(spec: &LatticeSpec, case_id: &str) -> CaseSpec {
    let mut case = CaseSpec::new(case_id);
    case.payload = serde_json::to_value(spec).expect("lattice serializes");
    case
}

pub fn lattice_of(case: &CaseSpec) -> Result<LatticeSpec, SimError> {
    let spec: LatticeSpec = serde_json::from_value(case.payload.clone())
        .map_err(|e| SimError::InvalidSpec(format!("case {} payload: {e}", case.id)))?;
    spec.check()?;
    Ok(spec)
}

/// A state for `actions` on the lattice's own case, language and platform.
pub fn sim_state<S: AsRef<str>>(spec: &LatticeSpec, case_id: &str, actions: &[S], role: StateRole) -> Result<KernelState, SimError> {
    let applied: Vec<String> = actions.iter().map(|a| a.as_ref().to_string()).collect();
    for a in &applied {
        if spec.action(a).is_none() {
            return Err(SimError::InvalidAction(a.clone()));
        }
    }
    let text = SimProgram::new(&applied).render();
    Ok(KernelState::new(text, &spec.language, &spec.platform, case_id, applied, role)?)
}

/// The expert: every action applied, in topological order.
pub fn expert_state(spec: &LatticeSpec) -> Result<KernelState, SimError> {
    spec.check()?;
    let order = spec.topological_order()?;
    sim_state(spec, &spec.case, &order, StateRole::Expert)
}

/// Case id of the held-out start pool.
pub fn holdout_case(spec: &LatticeSpec) -> String {
    format!("{}-holdout", spec.case)
}

/// Fresh start states disjoint from any induced lineage: the empty program
/// and, for every action, exactly its precondition closure. They live in a
/// separate case so their ids never collide with lineage states.
pub fn holdout_pool(spec: &LatticeSpec) -> Result<Vec<KernelState>, SimError> {
    spec.check()?;
    let case = holdout_case(spec);
    let mut seen = BTreeMap::new();
    let empty: [&str; 0] = [];
    let s = sim_state(spec, &case, &empty, StateRole::Candidate)?;
    seen.insert(s.id.clone(), s);
    for a in &spec.actions {
        let s = sim_state(spec, &case, &spec.closure(&a.id)?, StateRole::Candidate)?;
        seen.entry(s.id.clone()).or_insert(s);
    }
    let mut pool: Vec<KernelState> = seen.into_values().collect();
    pool.sort_by(|a, b| a.applied_actions.len().cmp(&b.applied_actions.len()).then(a.id.cmp(&b.id)));
    Ok(pool)
}

/// Multiplicative lognormal measurement noise, seeded per state and sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Noise {
    pub sigma: f64,
    pub seed: u64,
}

/// Runner over the lattice carried in the case payload.
#[derive(Debug, Clone, Default)]
pub struct SimRunner {
    pub noise: Option<Noise>,
}

impl SimRunner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_noise(sigma: f64, seed: u64) -> Self {
        Self {
            noise: Some(Noise { sigma, seed }),
        }
    }

    fn samples(&self, state_id: &str, latency: f64, reps: u32) -> Vec<f64> {
        match self.noise {
            Some(n) if n.sigma > 0.0 => {
                let key = digest_fields("sim-noise/v1", &[state_id, &n.seed.to_string()]);
                let seed = u64::from_str_radix(&key[..16], 16).expect("hex digest");
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = LogNormal::new(0.0, n.sigma).expect("finite sigma");
                (0..reps).map(|_| latency * dist.sample(&mut rng)).collect()
            }
            _ => vec![latency; reps as usize],
        }
    }

    pub fn respond(&self, req: &RunnerRequest) -> RunnerResponse {
        let spec = match lattice_of(&req.case) {
            Ok(s) => s,
            Err(e) => return RunnerResponse::fail(RunnerFailure::Error, e.to_string()),
        };
        let prog = match SimProgram::parse(&req.state.source_text) {
            Ok(p) => p,
            Err(e) => return RunnerResponse::fail(RunnerFailure::CompileFail, e.to_string()),
        };
        let actions: Vec<&str> = prog.actions.iter().map(String::as_str).collect();
        let outcome = match spec.sim_latency(&actions) {
            Ok(o) => o,
            Err(e) => return RunnerResponse::fail(RunnerFailure::CompileFail, e.to_string()),
        };
        match req.phase {
            Phase::Compile => RunnerResponse::ok(),
            Phase::Correctness | Phase::Probe => {
                if prog.wrapper {
                    // The wrapper copies the reference output, which passes
                    // unless the reference is poisoned.
                    if req.poison_reference {
                        RunnerResponse::fail(RunnerFailure::Wrapper, "reference poisoned; fallback path raised")
                    } else {
                        RunnerResponse::ok()
                    }
                } else {
                    match outcome {
                        SimOutcome::Latency(_) => RunnerResponse::ok(),
                        SimOutcome::Incorrect { action, missing } => RunnerResponse::fail(
                            RunnerFailure::Incorrect,
                            format!("{action} requires {}", missing.join(", ")),
                        ),
                    }
                }
            }
            Phase::Profile => {
                let latency = match (prog.wrapper, outcome) {
                    (true, SimOutcome::Latency(l)) => l,
                    (true, SimOutcome::Incorrect { .. }) => spec.reference(),
                    (false, SimOutcome::Latency(l)) => l,
                    (false, SimOutcome::Incorrect { .. }) => {
                        return RunnerResponse::fail(RunnerFailure::Incorrect, "profiling an incorrect program")
                    }
                };
                RunnerResponse::samples(self.samples(&req.state.id, latency, req.config.reps))
            }
        }
    }
}

impl Runner for SimRunner {
    fn call(&self, request: &RunnerRequest, _timeout: Duration) -> Result<RunnerResponse, GateError> {
        Ok(self.respond(request))
    }
}

/// Serves one runner request read from `input`; never emits a malformed
/// response.
pub fn serve_runner(runner: &SimRunner, input: &[u8]) -> Vec<u8> {
    let resp = match crate::gate::parse_runner_request(input) {
        Ok(req) => runner.respond(&req),
        Err(e) => RunnerResponse::fail(RunnerFailure::Error, e.to_string()),
    };
    serde_json::to_vec(&resp).expect("response serializes")
}

/// Synthetic token counts per rewriter call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCostTable {
    pub default_input_tokens: u64,
    pub default_output_tokens: u64,
    #[serde(default)]
    pub per_action: BTreeMap<String, (u64, u64)>,
}

impl Default for SimCostTable {
    fn default() -> Self {
        Self {
            default_input_tokens: 3000,
            default_output_tokens: 800,
            per_action: BTreeMap::new(),
        }
    }
}

impl SimCostTable {
    pub fn usage(&self, action: &str) -> TokenUsage {
        let (input, output) = self
            .per_action
            .get(action)
            .copied()
            .unwrap_or((self.default_input_tokens, self.default_output_tokens));
        TokenUsage {
            input_tokens: input,
            cached_input_tokens: 0,
            output_tokens: output,
            includes_prefix: false,
        }
    }
}

/// Deterministic textual edits on sim programs. Edits that break a
/// precondition still succeed textually; the gate has to catch them.
#[derive(Debug, Clone, Default)]
pub struct SimRewriter {
    pub costs: SimCostTable,
}

/// Actions named by `+apply` lines of a diff-sketch carrier.
fn carrier_actions(carrier: &str) -> Vec<String> {
    carrier
        .lines()
        .filter_map(|l| l.strip_prefix("+apply "))
        .map(|a| a.trim().to_string())
        .filter(|a| program::valid_action_id(a))
        .collect()
}

impl SimRewriter {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Rewriter for SimRewriter {
    fn rewrite(&self, req: &RewriteRequest) -> Result<RewriteResponse, RewriteError> {
        let mut prog = SimProgram::parse(&req.source).map_err(|e| RewriteError::Protocol(e.to_string()))?;
        let named = req.action_category.clone();
        let (edits, remove) = match req.mode {
            RewriteMode::Remove => (named.into_iter().collect::<Vec<_>>(), true),
            RewriteMode::Add => (named.into_iter().collect(), false),
            RewriteMode::Materialize => {
                let from_carrier = req.carrier.as_deref().map(carrier_actions).unwrap_or_default();
                if from_carrier.is_empty() {
                    (named.into_iter().collect(), false)
                } else {
                    (from_carrier, false)
                }
            }
        };
        if edits.is_empty() {
            return Err(RewriteError::Protocol("request names no action".into()));
        }
        for a in &edits {
            if !program::valid_action_id(a) {
                return Err(RewriteError::Protocol(format!("invalid action id {a:?}")));
            }
            let changed = if remove {
                prog.actions.remove(a)
            } else {
                prog.actions.insert(a.clone())
            };
            if !changed {
                let verb = if remove { "not applied" } else { "already applied" };
                return Err(RewriteError::Failed(format!("{a} is {verb}")));
            }
        }
        Ok(RewriteResponse {
            source: prog.render(),
            usage: self.costs.usage(&edits[0]),
            warnings: Vec::new(),
        })
    }
}

/// Serves one rewrite request; failures are reported as `{"error": ...}`.
pub fn serve_rewriter(rewriter: &SimRewriter, input: &[u8]) -> Vec<u8> {
    let out = match serde_json::from_slice::<RewriteRequest>(input) {
        Ok(req) => match rewriter.rewrite(&req) {
            Ok(resp) => serde_json::to_value(resp).expect("response serializes"),
            Err(e) => serde_json::json!({ "error": e.to_string() }),
        },
        Err(e) => serde_json::json!({ "error": format!("malformed request: {e}") }),
    };
    serde_json::to_vec(&out).expect("json serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::{validate, GateConfig};
    use crate::model::{ProbeOutcome, ValidationStatus};

    fn gate_config() -> GateConfig {
        GateConfig {
            reps: 5,
            ..GateConfig::default()
        }
    }

    #[test]
    fn runner_verdicts_follow_lattice() {
        let spec = LatticeSpec::chain3();
        let case = case_spec(&spec, "sim");
        let runner = SimRunner::new();
        let ok = sim_state(&spec, "sim", &["tile"], StateRole::Candidate).unwrap();
        let rec = validate(&ok, &case, &gate_config(), &runner).unwrap();
        assert_eq!(rec.status, ValidationStatus::Valid);
        assert_eq!(rec.latency_ms, Some(500.0));
        assert_eq!(rec.wrapper_probe, ProbeOutcome::RealKernel);

        let bad = sim_state(&spec, "sim", &["vectorize"], StateRole::Candidate).unwrap();
        let rec = validate(&bad, &case, &gate_config(), &runner).unwrap();
        assert_eq!(rec.status, ValidationStatus::Incorrect);
    }

    #[test]
    fn wrapper_is_caught_by_probe() {
        let mut spec = LatticeSpec::chain3();
        spec.reference_latency = Some(100.0);
        let case = case_spec(&spec, "sim");
        let text = SimProgram::new(&["vectorize"]).wrapper().render();
        let state = KernelState::new(text, "sim", "sim", "sim", vec!["vectorize".into()], StateRole::Candidate).unwrap();
        let rec = validate(&state, &case, &gate_config(), &SimRunner::new()).unwrap();
        assert_eq!(rec.status, ValidationStatus::Wrapper);
        assert_eq!(rec.wrapper_probe, ProbeOutcome::Wrapper);
        assert_eq!(rec.apparent_latency_ms, Some(100.0));
        assert_eq!(rec.latency_ms, None);
    }

    #[test]
    fn noise_is_seeded() {
        let r = SimRunner::with_noise(0.01, 3);
        let a = r.samples("s", 10.0, 50);
        assert_eq!(a, r.samples("s", 10.0, 50));
        assert_ne!(a, r.samples("t", 10.0, 50));
        assert!(a.iter().all(|x| (x / 10.0 - 1.0).abs() < 0.06));
    }

    #[test]
    fn rewriter_edits_text_only() {
        let rw = SimRewriter::new();
        let base = SimProgram::new(&["tile"]).render();
        let req = RewriteRequest::new(RewriteMode::Add, &base, "sim", "sim").action("vectorize", None);
        let out = rw.rewrite(&req).unwrap();
        assert_eq!(out.source, SimProgram::new(&["tile", "vectorize"]).render());
        assert_eq!(out.usage.input_tokens, 3000);

        let empty = SimProgram::default().render();
        let req = RewriteRequest::new(RewriteMode::Add, &empty, "sim", "sim").action("pipeline", None);
        assert_eq!(rw.rewrite(&req).unwrap().source, SimProgram::new(&["pipeline"]).render());

        let both = SimProgram::new(&["tile", "vectorize"]).render();
        let req = RewriteRequest::new(RewriteMode::Remove, &both, "sim", "sim").action("tile", None);
        assert_eq!(rw.rewrite(&req).unwrap().source, SimProgram::new(&["vectorize"]).render());

        let req = RewriteRequest::new(RewriteMode::Remove, &empty, "sim", "sim").action("tile", None);
        assert!(matches!(rw.rewrite(&req), Err(RewriteError::Failed(_))));
    }

    #[test]
    fn materialize_reads_carrier() {
        let rw = SimRewriter::new();
        let base = SimProgram::new(&["tile"]).render();
        let mut req = RewriteRequest::new(RewriteMode::Materialize, &base, "sim", "sim");
        req.carrier = Some(crate::diff::make_diff(&base, &SimProgram::new(&["tile", "vectorize"]).render()));
        let out = rw.rewrite(&req).unwrap();
        assert_eq!(out.source, SimProgram::new(&["tile", "vectorize"]).render());
    }

    #[test]
    fn holdout_pool_shape() {
        let spec = LatticeSpec::chain3();
        let pool = holdout_pool(&spec).unwrap();
        let sets: Vec<Vec<String>> = pool.iter().map(|s| s.applied_actions.clone()).collect();
        assert_eq!(sets, vec![vec![], vec!["tile".to_string()], vec!["tile".into(), "vectorize".into()]]);
        assert!(pool.iter().all(|s| s.case_id == "sim-holdout"));
    }

    #[test]
    fn serve_never_malformed() {
        let out = serve_runner(&SimRunner::new(), b"not json");
        let resp = crate::gate::parse_runner_response(&out).unwrap();
        assert!(!resp.ok);
        let out = serve_rewriter(&SimRewriter::new(), b"{}");
        assert!(String::from_utf8(out).unwrap().contains("error"));
    }
}
