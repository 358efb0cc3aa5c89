//! The compile / correctness / profile / probe validation gate.
//!
//! The same gate is used for deoptimization steps, roundtrip admission trials
//! and online materialization. Execution is delegated to a [`Runner`]; the
//! gate owns ordering, short-circuiting, median timing and the wrapper probe.

pub mod protocol;
mod scripted;

use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use protocol::{
    parse_runner_request, parse_runner_response, CaseSpec, ConfigEcho, Phase, RunnerFailure, RunnerRequest,
    RunnerResponse, Tolerance,
};
pub use scripted::ScriptedRunner;

use crate::model::{KernelState, ProbeOutcome, SeedResult, ValidationRecord, ValidationStatus};
use crate::process::{exchange, ProcessError};

#[derive(Debug, Error)]
pub enum GateError {
    #[error("runner timed out in {phase} phase")]
    Timeout { phase: Phase },
    #[error("runner protocol error: {0}")]
    Protocol(String),
    #[error("runner does not support the wrapper probe")]
    ProbeUnsupported,
    #[error("no latency samples")]
    InvalidSamples,
    #[error("runner unavailable: {0}")]
    Unavailable(String),
}

impl GateError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GateError::Timeout { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimeouts {
    pub compile_s: f64,
    pub correctness_s: f64,
    pub profile_s: f64,
    pub probe_s: f64,
}

impl Default for PhaseTimeouts {
    fn default() -> Self {
        Self {
            compile_s: 120.0,
            correctness_s: 60.0,
            profile_s: 120.0,
            probe_s: 60.0,
        }
    }
}

impl PhaseTimeouts {
    pub fn for_phase(&self, phase: Phase) -> Duration {
        let s = match phase {
            Phase::Compile => self.compile_s,
            Phase::Correctness => self.correctness_s,
            Phase::Profile => self.profile_s,
            Phase::Probe => self.probe_s,
        };
        Duration::from_secs_f64(s.max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub seeds: Vec<u64>,
    pub warmups: u32,
    pub reps: u32,
    pub probe_enabled: bool,
    pub timeouts: PhaseTimeouts,
    pub gate_version: String,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            warmups: ValidationRecord::DEFAULT_WARMUPS,
            reps: ValidationRecord::DEFAULT_REPS,
            probe_enabled: true,
            timeouts: PhaseTimeouts::default(),
            gate_version: concat!("gate/", env!("CARGO_PKG_VERSION")).to_string(),
        }
    }
}

impl GateConfig {
    pub fn check(&self) -> Result<(), GateError> {
        if self.seeds.is_empty() {
            return Err(GateError::Protocol("gate config needs at least one seed".into()));
        }
        if self.reps == 0 {
            return Err(GateError::Protocol("gate config needs reps >= 1".into()));
        }
        Ok(())
    }
}

/// Executes gate phases for one candidate.
pub trait Runner: Send + Sync {
    fn call(&self, request: &RunnerRequest, timeout: Duration) -> Result<RunnerResponse, GateError>;
}

impl<R: Runner + ?Sized> Runner for Arc<R> {
    fn call(&self, request: &RunnerRequest, timeout: Duration) -> Result<RunnerResponse, GateError> {
        (**self).call(request, timeout)
    }
}

/// A runner spawned as an external command speaking the JSON protocol.
#[derive(Debug, Clone)]
pub struct ProcessRunner {
    pub argv: Vec<String>,
}

impl ProcessRunner {
    pub fn new(argv: Vec<String>) -> Self {
        Self { argv }
    }
}

impl Runner for ProcessRunner {
    fn call(&self, request: &RunnerRequest, timeout: Duration) -> Result<RunnerResponse, GateError> {
        run_external(request, &self.argv, timeout)
    }
}

/// Serializes `request` to the runner's stdin and parses its stdout.
///
/// A nonzero exit with a parseable response is a phase failure, not a
/// protocol error.
pub fn run_external(request: &RunnerRequest, argv: &[String], timeout: Duration) -> Result<RunnerResponse, GateError> {
    let payload = serde_json::to_vec(request).map_err(|e| GateError::Protocol(e.to_string()))?;
    let out = match exchange(argv, &payload, timeout) {
        Ok(out) => out,
        Err(ProcessError::Timeout(_)) => return Err(GateError::Timeout { phase: request.phase }),
        Err(e) => return Err(GateError::Unavailable(e.to_string())),
    };
    let mut resp = parse_runner_response(&out.stdout)?;
    if !out.success && resp.ok {
        resp.ok = false;
        resp.failure_kind.get_or_insert(RunnerFailure::Error);
        if resp.detail.is_empty() {
            resp.detail = String::from_utf8_lossy(&out.stderr).into_owned();
        }
    }
    Ok(resp)
}

/// Median of latency samples; mean of the two middle values for even counts.
pub fn bench_median(samples: &[f64]) -> Result<f64, GateError> {
    if samples.is_empty() {
        return Err(GateError::InvalidSamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    })
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn request(state: &KernelState, case: &CaseSpec, config: &GateConfig, phase: Phase, seed: Option<u64>) -> RunnerRequest {
    RunnerRequest {
        phase,
        state: state.clone(),
        case: case.clone(),
        seed,
        config: ConfigEcho {
            warmups: config.warmups,
            reps: config.reps,
        },
        poison_reference: phase == Phase::Probe,
    }
}

/// Re-runs correctness with the reference implementation poisoned. A
/// candidate that only passed by delegating to the reference now fails.
pub fn wrapper_probe(
    state: &KernelState,
    case: &CaseSpec,
    config: &GateConfig,
    runner: &dyn Runner,
) -> Result<ProbeOutcome, GateError> {
    let seed = config.seeds.first().copied();
    let req = request(state, case, config, Phase::Probe, seed);
    let resp = runner.call(&req, config.timeouts.for_phase(Phase::Probe))?;
    if resp.ok {
        return Ok(ProbeOutcome::RealKernel);
    }
    match resp.failure_kind {
        Some(RunnerFailure::Unsupported) => Err(GateError::ProbeUnsupported),
        Some(RunnerFailure::Timeout) => Err(GateError::Timeout { phase: Phase::Probe }),
        _ => Ok(ProbeOutcome::Wrapper),
    }
}

/// Runs compile, correctness over every seed, profile and the probe in that
/// order. The first failing phase decides the status.
pub fn validate(
    state: &KernelState,
    case: &CaseSpec,
    config: &GateConfig,
    runner: &dyn Runner,
) -> Result<ValidationRecord, GateError> {
    config.check()?;
    let mut rec = ValidationRecord {
        status: ValidationStatus::Unvalidated,
        compile_ok: false,
        seed_results: Vec::new(),
        latency_ms: None,
        apparent_latency_ms: None,
        warmups: config.warmups,
        reps: config.reps,
        wrapper_probe: ProbeOutcome::NotRun,
        gate_version: config.gate_version.clone(),
        timestamp: now_ms(),
        detail: None,
    };
    let call = |phase: Phase, seed: Option<u64>| -> Result<RunnerResponse, GateError> {
        let resp = runner.call(&request(state, case, config, phase, seed), config.timeouts.for_phase(phase))?;
        if !resp.ok && resp.failure_kind == Some(RunnerFailure::Timeout) {
            return Err(GateError::Timeout { phase });
        }
        Ok(resp)
    };

    let resp = call(Phase::Compile, None)?;
    if !resp.ok {
        rec.status = ValidationStatus::CompileFail;
        rec.detail = Some(resp.detail);
        return Ok(rec);
    }
    rec.compile_ok = true;

    for &seed in &config.seeds {
        let resp = call(Phase::Correctness, Some(seed))?;
        rec.seed_results.push(SeedResult { seed, passed: resp.ok });
        if !resp.ok {
            rec.status = match resp.failure_kind {
                Some(RunnerFailure::CompileFail) => ValidationStatus::CompileFail,
                _ => ValidationStatus::Incorrect,
            };
            rec.detail = Some(format!("seed {seed}: {}", resp.detail));
            return Ok(rec);
        }
    }

    let resp = call(Phase::Profile, None)?;
    if !resp.ok {
        rec.status = ValidationStatus::Incorrect;
        rec.detail = Some(format!("profile: {}", resp.detail));
        return Ok(rec);
    }
    if resp.samples.len() != config.reps as usize {
        return Err(GateError::Protocol(format!(
            "profile returned {} samples, expected {}",
            resp.samples.len(),
            config.reps
        )));
    }
    let median = bench_median(&resp.samples)?;

    if config.probe_enabled {
        match wrapper_probe(state, case, config, runner) {
            Ok(ProbeOutcome::Wrapper) => {
                rec.wrapper_probe = ProbeOutcome::Wrapper;
                rec.status = ValidationStatus::Wrapper;
                rec.apparent_latency_ms = Some(median);
                rec.detail = Some(format!("fails with reference poisoned; apparent latency {median} ms"));
                return Ok(rec);
            }
            Ok(outcome) => rec.wrapper_probe = outcome,
            Err(GateError::ProbeUnsupported) => {
                // Not eligible for credit: leave unvalidated, probe not run.
                rec.apparent_latency_ms = Some(median);
                rec.detail = Some(format!("probe unsupported by runner; measured {median} ms"));
                return Ok(rec);
            }
            Err(e) => return Err(e),
        }
    }
    rec.status = ValidationStatus::Valid;
    rec.latency_ms = Some(median);
    Ok(rec)
}

/// A runner plus configuration, with an append-only verdict log.
pub struct Gate {
    pub config: GateConfig,
    runner: Arc<dyn Runner>,
    log: Mutex<Vec<VerdictLogEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictLogEntry {
    pub state_id: String,
    pub case_id: String,
    pub status: ValidationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
}

impl Gate {
    pub fn new(config: GateConfig, runner: Arc<dyn Runner>) -> Self {
        Self {
            config,
            runner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn runner(&self) -> &dyn Runner {
        self.runner.as_ref()
    }

    pub fn validate(&self, state: &KernelState, case: &CaseSpec) -> Result<ValidationRecord, GateError> {
        let rec = validate(state, case, &self.config, self.runner.as_ref())?;
        self.log.lock().expect("verdict log poisoned").push(VerdictLogEntry {
            state_id: state.id.clone(),
            case_id: case.id.clone(),
            status: rec.status,
            latency_ms: rec.latency_ms,
        });
        Ok(rec)
    }

    /// Validates with one retry on timeout.
    pub fn validate_retrying(&self, state: &KernelState, case: &CaseSpec) -> Result<ValidationRecord, GateError> {
        match self.validate(state, case) {
            Err(e) if e.is_retryable() => self.validate(state, case),
            other => other,
        }
    }

    pub fn verdicts(&self) -> Vec<VerdictLogEntry> {
        self.log.lock().expect("verdict log poisoned").clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn median_rules() {
        assert_eq!(bench_median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(bench_median(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert_eq!(bench_median(&[0.0157; 100]).unwrap(), 0.0157);
        assert!(matches!(bench_median(&[]), Err(GateError::InvalidSamples)));
    }

    struct CountingRunner {
        calls: AtomicUsize,
        phases: Mutex<Vec<Phase>>,
        fail_at: Option<Phase>,
        samples: usize,
    }

    impl Runner for CountingRunner {
        fn call(&self, req: &RunnerRequest, _t: Duration) -> Result<RunnerResponse, GateError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.phases.lock().unwrap().push(req.phase);
            if Some(req.phase) == self.fail_at {
                return Ok(RunnerResponse::fail(RunnerFailure::Incorrect, "nope"));
            }
            Ok(match req.phase {
                Phase::Profile => RunnerResponse::samples(vec![1.0; self.samples]),
                _ => RunnerResponse::ok(),
            })
        }
    }

    fn state() -> KernelState {
        KernelState::new("k", "sim", "sim", "c", vec![], crate::model::StateRole::Candidate).unwrap()
    }

    fn small_config() -> GateConfig {
        GateConfig {
            reps: 5,
            ..GateConfig::default()
        }
    }

    #[test]
    fn phases_in_order_and_short_circuit() {
        let r = CountingRunner {
            calls: AtomicUsize::new(0),
            phases: Mutex::new(vec![]),
            fail_at: None,
            samples: 5,
        };
        let rec = validate(&state(), &CaseSpec::new("c"), &small_config(), &r).unwrap();
        assert_eq!(rec.status, ValidationStatus::Valid);
        assert_eq!(rec.wrapper_probe, ProbeOutcome::RealKernel);
        assert_eq!(
            *r.phases.lock().unwrap(),
            vec![
                Phase::Compile,
                Phase::Correctness,
                Phase::Correctness,
                Phase::Correctness,
                Phase::Profile,
                Phase::Probe
            ]
        );

        let r = CountingRunner {
            calls: AtomicUsize::new(0),
            phases: Mutex::new(vec![]),
            fail_at: Some(Phase::Correctness),
            samples: 5,
        };
        let rec = validate(&state(), &CaseSpec::new("c"), &small_config(), &r).unwrap();
        assert_eq!(rec.status, ValidationStatus::Incorrect);
        assert_eq!(rec.seed_results.len(), 1);
        assert!(rec.latency_ms.is_none());
        assert!(!r.phases.lock().unwrap().contains(&Phase::Profile));
    }

    #[test]
    fn wrong_sample_count_is_protocol_error() {
        let r = CountingRunner {
            calls: AtomicUsize::new(0),
            phases: Mutex::new(vec![]),
            fail_at: None,
            samples: 4,
        };
        let err = validate(&state(), &CaseSpec::new("c"), &small_config(), &r).unwrap_err();
        assert!(matches!(err, GateError::Protocol(_)));
    }

    struct NoProbe;
    impl Runner for NoProbe {
        fn call(&self, req: &RunnerRequest, _t: Duration) -> Result<RunnerResponse, GateError> {
            Ok(match req.phase {
                Phase::Profile => RunnerResponse::samples(vec![2.0; req.config.reps as usize]),
                Phase::Probe => RunnerResponse::fail(RunnerFailure::Unsupported, "no probe"),
                _ => RunnerResponse::ok(),
            })
        }
    }

    #[test]
    fn unsupported_probe_is_not_credited() {
        let cfg = small_config();
        let err = wrapper_probe(&state(), &CaseSpec::new("c"), &cfg, &NoProbe).unwrap_err();
        assert!(matches!(err, GateError::ProbeUnsupported));
        let rec = validate(&state(), &CaseSpec::new("c"), &cfg, &NoProbe).unwrap();
        assert_eq!(rec.wrapper_probe, ProbeOutcome::NotRun);
        assert_eq!(rec.status, ValidationStatus::Unvalidated);
        assert!(!rec.is_creditable());
        rec.check().unwrap();

        let off = GateConfig {
            probe_enabled: false,
            ..cfg
        };
        let rec = validate(&state(), &CaseSpec::new("c"), &off, &NoProbe).unwrap();
        assert_eq!(rec.status, ValidationStatus::Valid);
        assert_eq!(rec.latency_ms, Some(2.0));
    }

    struct Slow;
    impl Runner for Slow {
        fn call(&self, req: &RunnerRequest, _t: Duration) -> Result<RunnerResponse, GateError> {
            Err(GateError::Timeout { phase: req.phase })
        }
    }

    #[test]
    fn timeout_propagates() {
        let err = validate(&state(), &CaseSpec::new("c"), &small_config(), &Slow).unwrap_err();
        assert!(err.is_retryable());
    }

    #[test]
    fn gate_logs_verdicts() {
        let gate = Gate::new(small_config(), Arc::new(NoProbe));
        gate.validate(&state(), &CaseSpec::new("c")).unwrap();
        assert_eq!(gate.verdicts().len(), 1);
    }
}
