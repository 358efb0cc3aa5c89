//! Runner wire protocol: one JSON request on stdin, one JSON response on
//! stdout. Field names `phase`, `ok` and `samples` are fixed.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::GateError;
use crate::model::KernelState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Compile,
    Correctness,
    Profile,
    Probe,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Phase::Compile => "compile",
            Phase::Correctness => "correctness",
            Phase::Profile => "profile",
            Phase::Probe => "probe",
        };
        f.write_str(s)
    }
}

/// Absolute + relative tolerance pair, defined per case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub atol: f64,
    pub rtol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { atol: 1e-5, rtol: 1e-3 }
    }
}

/// A workload definition: tolerance, reference entry point and a
/// runner-specific payload (the lattice for the sim runner).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub id: String,
    #[serde(default)]
    pub tolerance: Tolerance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub payload: Value,
}

impl CaseSpec {
    pub fn new(id: &str) -> Self {
        Self {
            id: id.to_string(),
            tolerance: Tolerance::default(),
            reference: None,
            payload: Value::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub warmups: u32,
    pub reps: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerRequest {
    pub phase: Phase,
    pub state: KernelState,
    pub case: CaseSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub config: ConfigEcho,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub poison_reference: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunnerFailure {
    CompileFail,
    Incorrect,
    Wrapper,
    Timeout,
    Unsupported,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerResponse {
    pub ok: bool,
    #[serde(default)]
    pub detail: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_kind: Option<RunnerFailure>,
}

impl RunnerResponse {
    pub fn ok() -> Self {
        Self {
            ok: true,
            detail: String::new(),
            samples: Vec::new(),
            failure_kind: None,
        }
    }

    pub fn fail(kind: RunnerFailure, detail: impl Into<String>) -> Self {
        Self {
            ok: false,
            detail: detail.into(),
            samples: Vec::new(),
            failure_kind: Some(kind),
        }
    }

    pub fn samples(samples: Vec<f64>) -> Self {
        Self {
            samples,
            ..Self::ok()
        }
    }
}

/// Parses one runner response document.
pub fn parse_runner_response(bytes: &[u8]) -> Result<RunnerResponse, GateError> {
    let text = std::str::from_utf8(bytes).map_err(|e| GateError::Protocol(format!("response is not utf-8: {e}")))?;
    let resp: RunnerResponse =
        serde_json::from_str(text.trim()).map_err(|e| GateError::Protocol(format!("unparseable response: {e}")))?;
    if resp.samples.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(GateError::Protocol("latency samples must be positive and finite".into()));
    }
    Ok(resp)
}

/// Parses one runner request document (runner side).
pub fn parse_runner_request(bytes: &[u8]) -> Result<RunnerRequest, GateError> {
    let text = std::str::from_utf8(bytes).map_err(|e| GateError::Protocol(format!("request is not utf-8: {e}")))?;
    serde_json::from_str(text.trim()).map_err(|e| GateError::Protocol(format!("unparseable request: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_parse_accepts_minimal_document() {
        let r = parse_runner_response(br#"{"ok": true}"#).unwrap();
        assert!(r.ok);
        assert!(r.samples.is_empty());
        let r = parse_runner_response(br#"{"ok": false, "failure_kind": "wrapper", "detail": "x"}"#).unwrap();
        assert_eq!(r.failure_kind, Some(RunnerFailure::Wrapper));
    }

    #[test]
    fn response_parse_rejects_garbage() {
        assert!(matches!(parse_runner_response(b"not json"), Err(GateError::Protocol(_))));
        assert!(matches!(parse_runner_response(b"{}"), Err(GateError::Protocol(_))));
        assert!(matches!(
            parse_runner_response(br#"{"ok": true, "samples": [-1.0]}"#),
            Err(GateError::Protocol(_))
        ));
        assert!(parse_runner_response(&[0xff, 0xfe]).is_err());
    }

    #[test]
    fn probe_flag_on_the_wire() {
        let state = KernelState::new("x", "sim", "sim", "c", vec![], crate::model::StateRole::Candidate).unwrap();
        let req = RunnerRequest {
            phase: Phase::Probe,
            state,
            case: CaseSpec::new("c"),
            seed: Some(0),
            config: ConfigEcho { warmups: 25, reps: 100 },
            poison_reference: true,
        };
        let v: Value = serde_json::to_value(&req).unwrap();
        assert_eq!(v["phase"], "probe");
        assert_eq!(v["poison_reference"], true);
        let back = parse_runner_request(serde_json::to_string(&req).unwrap().as_bytes()).unwrap();
        assert_eq!(back, req);
    }
}
