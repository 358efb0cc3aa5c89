use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{digest_state, schema_version, Document, ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateRole {
    Expert,
    Intermediate,
    Naive,
    Candidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationStatus {
    Unvalidated,
    CompileFail,
    Incorrect,
    Wrapper,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOutcome {
    NotRun,
    RealKernel,
    Wrapper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub passed: bool,
}

/// Outcome of one pass through the compile / correctness / profile / probe gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub status: ValidationStatus,
    pub compile_ok: bool,
    #[serde(default)]
    pub seed_results: Vec<SeedResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
    /// Measured median for candidates that ran but earned no credit
    /// (wrappers, probe not run).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub apparent_latency_ms: Option<f64>,
    pub warmups: u32,
    pub reps: u32,
    pub wrapper_probe: ProbeOutcome,
    pub gate_version: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl ValidationRecord {
    pub const DEFAULT_WARMUPS: u32 = 25;
    pub const DEFAULT_REPS: u32 = 100;

    pub fn unvalidated(gate_version: &str) -> Self {
        Self {
            status: ValidationStatus::Unvalidated,
            compile_ok: false,
            seed_results: Vec::new(),
            latency_ms: None,
            apparent_latency_ms: None,
            warmups: Self::DEFAULT_WARMUPS,
            reps: Self::DEFAULT_REPS,
            wrapper_probe: ProbeOutcome::NotRun,
            gate_version: gate_version.to_string(),
            timestamp: 0,
            detail: None,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.status == ValidationStatus::Valid
    }

    /// Valid and not flagged by the wrapper probe.
    pub fn is_creditable(&self) -> bool {
        self.is_valid() && self.wrapper_probe != ProbeOutcome::Wrapper
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidState(m.to_string()));
        if self.latency_ms.is_some() != (self.status == ValidationStatus::Valid) {
            return bad("latency_ms must be present iff status is valid");
        }
        if let Some(l) = self.latency_ms {
            if !(l > 0.0) || !l.is_finite() {
                return bad("latency_ms must be positive");
            }
        }
        if self.status == ValidationStatus::Valid {
            if !self.compile_ok {
                return bad("valid record without compile_ok");
            }
            if self.seed_results.iter().any(|s| !s.passed) {
                return bad("valid record with a failing seed");
            }
            if self.wrapper_probe == ProbeOutcome::Wrapper {
                return bad("valid record flagged as wrapper");
            }
        }
        if self.status == ValidationStatus::Wrapper && self.wrapper_probe != ProbeOutcome::Wrapper {
            return bad("wrapper status without wrapper probe outcome");
        }
        if self.reps == 0 {
            return bad("reps must be at least 1");
        }
        Ok(())
    }

    /// Equality ignoring the timestamp.
    pub fn same_verdict(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.timestamp = other.timestamp;
        &a == other
    }
}

/// One program variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelState {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub id: String,
    pub source_text: String,
    pub language: String,
    pub platform: String,
    pub case_id: String,
    #[serde(default)]
    pub applied_actions: Vec<String>,
    pub role: StateRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationRecord>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl KernelState {
    pub fn new(
        source_text: impl Into<String>,
        language: impl Into<String>,
        platform: impl Into<String>,
        case_id: impl Into<String>,
        applied_actions: Vec<String>,
        role: StateRole,
    ) -> Result<Self> {
        let source_text = source_text.into();
        let language = language.into();
        let platform = platform.into();
        let case_id = case_id.into();
        let id = digest_state(&source_text, &language, &platform, &case_id)?;
        let state = Self {
            schema_version: super::SCHEMA_VERSION,
            id,
            source_text,
            language,
            platform,
            case_id,
            applied_actions,
            role,
            validation: None,
            extra: BTreeMap::new(),
        };
        state.check_actions()?;
        Ok(state)
    }

    /// A sibling state with new source text and applied actions, same
    /// language, platform and case.
    pub fn derive(&self, source_text: impl Into<String>, applied_actions: Vec<String>, role: StateRole) -> Result<Self> {
        Self::new(
            source_text,
            self.language.clone(),
            self.platform.clone(),
            self.case_id.clone(),
            applied_actions,
            role,
        )
    }

    pub fn with_validation(mut self, record: ValidationRecord) -> Self {
        self.validation = Some(record);
        self
    }

    pub fn latency(&self) -> Option<f64> {
        self.validation.as_ref().and_then(|v| v.latency_ms)
    }

    pub fn is_valid(&self) -> bool {
        self.validation.as_ref().is_some_and(|v| v.is_valid())
    }

    pub fn action_set(&self) -> BTreeSet<&str> {
        self.applied_actions.iter().map(String::as_str).collect()
    }

    pub fn has_action(&self, action: &str) -> bool {
        self.applied_actions.iter().any(|a| a == action)
    }

    /// Recomputes the content digest.
    pub fn recompute_id(&self) -> Result<String> {
        digest_state(&self.source_text, &self.language, &self.platform, &self.case_id)
    }

    fn check_actions(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for a in &self.applied_actions {
            if !seen.insert(a) {
                return Err(ModelError::InvalidState(format!("duplicate applied action {a}")));
            }
        }
        Ok(())
    }
}

impl Document for KernelState {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }

    fn check(&self) -> Result<()> {
        if self.recompute_id()? != self.id {
            return Err(ModelError::InvalidState(format!("id {} does not match content digest", self.id)));
        }
        self.check_actions()?;
        if let Some(v) = &self.validation {
            v.check()?;
        }
        Ok(())
    }
}
