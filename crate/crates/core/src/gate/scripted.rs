use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use super::{GateError, Phase, Runner, RunnerFailure, RunnerRequest, RunnerResponse};

/// Replays recorded measurements keyed by exact source text. Unknown
/// programs fail to compile; programs listed as incorrect fail every seed.
#[derive(Debug, Clone, Default)]
pub struct ScriptedRunner {
    latencies: BTreeMap<String, f64>,
    incorrect: BTreeSet<String>,
}

impl ScriptedRunner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn program(mut self, source: &str, latency_ms: f64) -> Self {
        self.latencies.insert(source.to_string(), latency_ms);
        self
    }

    pub fn incorrect(mut self, source: &str) -> Self {
        self.incorrect.insert(source.to_string());
        self
    }
}

impl Runner for ScriptedRunner {
    fn call(&self, req: &RunnerRequest, _timeout: Duration) -> Result<RunnerResponse, GateError> {
        let src = &req.state.source_text;
        let known = self.latencies.contains_key(src) || self.incorrect.contains(src);
        if !known {
            return Ok(RunnerResponse::fail(RunnerFailure::CompileFail, "unknown program"));
        }
        Ok(match req.phase {
            Phase::Compile => RunnerResponse::ok(),
            Phase::Correctness | Phase::Probe if self.incorrect.contains(src) => {
                RunnerResponse::fail(RunnerFailure::Incorrect, "output mismatch")
            }
            Phase::Correctness | Phase::Probe => RunnerResponse::ok(),
            Phase::Profile => {
                let l = self.latencies[src];
                RunnerResponse::samples(vec![l; req.config.reps as usize])
            }
        })
    }
}
