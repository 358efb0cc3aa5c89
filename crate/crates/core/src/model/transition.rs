use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{digest_fields, ratio_bucket, schema_version, Document, KernelState, ModelError, Result, StateRole};

/// Where in the program an action applies.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Locus {
    pub file: String,
    #[serde(default)]
    pub symbol_path: String,
    pub line_span: (u32, u32),
    pub structural_tag: String,
}

impl Locus {
    pub fn new(file: &str, symbol_path: &str, line_span: (u32, u32), structural_tag: &str) -> Result<Self> {
        let locus = Self {
            file: file.to_string(),
            symbol_path: symbol_path.to_string(),
            line_span,
            structural_tag: structural_tag.to_string(),
        };
        locus.check()?;
        Ok(locus)
    }

    /// A whole-unit locus carrying only a structural tag.
    pub fn tagged(file: &str, structural_tag: &str) -> Self {
        Self {
            file: file.to_string(),
            symbol_path: String::new(),
            line_span: (0, 0),
            structural_tag: structural_tag.to_string(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.line_span.0 > self.line_span.1 {
            return Err(ModelError::InvalidLocus(format!(
                "line span start {} > end {}",
                self.line_span.0, self.line_span.1
            )));
        }
        if self.structural_tag.is_empty() {
            return Err(ModelError::InvalidLocus("empty structural tag".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSignature {
    /// from_latency / to_latency.
    pub latency_ratio: f64,
    pub ratio_bucket: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_metrics: Option<BTreeMap<String, f64>>,
}

impl EffectSignature {
    pub fn from_ratio(latency_ratio: f64) -> Result<Self> {
        Ok(Self {
            latency_ratio,
            ratio_bucket: ratio_bucket(latency_ratio)?,
            aux_metrics: None,
        })
    }

    pub fn from_latencies(from_latency: f64, to_latency: f64) -> Result<Self> {
        if !(to_latency > 0.0) {
            return Err(ModelError::InvalidEffect(to_latency));
        }
        Self::from_ratio(from_latency / to_latency)
    }

    pub fn check(&self) -> Result<()> {
        if ratio_bucket(self.latency_ratio)? != self.ratio_bucket {
            return Err(ModelError::InvalidEffect(self.latency_ratio));
        }
        Ok(())
    }
}

/// A validated forward edit from a simpler state toward the expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTransition {
    pub id: String,
    pub from_state_id: String,
    pub to_state_id: String,
    pub action_category: String,
    pub locus: Locus,
    /// Unified diff that turns the from-state text into the to-state text.
    pub forward_diff: String,
    /// The validated re-derived edit, when it differs textually from
    /// `forward_diff`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rederived_diff: Option<String>,
    pub effect: EffectSignature,
    pub origin_expert_id: String,
    pub validation_match: bool,
    #[serde(default)]
    pub rejected: bool,
}

impl ForwardTransition {
    pub fn transition_id(from_state_id: &str, to_state_id: &str, action_category: &str) -> String {
        digest_fields("forward-transition/v1", &[from_state_id, to_state_id, action_category])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    CompileFail,
    Incorrect,
    Slower,
    Wrapper,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolatedPrecondition {
    pub text: String,
    #[serde(default)]
    pub missing_actions: Vec<String>,
}

/// A rejected simplification, kept as precondition-violation evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEvidence {
    pub action_category: String,
    pub locus: Locus,
    pub violated_precondition: ViolatedPrecondition,
    pub observed_failure: FailureKind,
    pub source_state_id: String,
}

/// The chain K0 -> ... -> Kn = expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub expert_id: String,
    pub case_id: String,
    pub language: String,
    pub platform: String,
    pub states: Vec<KernelState>,
    pub transitions: Vec<ForwardTransition>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl Lineage {
    pub fn expert(&self) -> Option<&KernelState> {
        self.states.last()
    }

    pub fn naive(&self) -> Option<&KernelState> {
        self.states.first()
    }

    pub fn state(&self, id: &str) -> Option<&KernelState> {
        self.states.iter().find(|s| s.id == id)
    }
}

impl Document for Lineage {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }

    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidLineage(m));
        if self.states.len() < 2 {
            return bad(format!("lineage needs at least two states, has {}", self.states.len()));
        }
        if self.transitions.len() != self.states.len() - 1 {
            return bad(format!(
                "{} transitions for {} states",
                self.transitions.len(),
                self.states.len()
            ));
        }
        for s in &self.states {
            s.check()?;
            if !s.is_valid() {
                return bad(format!("state {} is not valid", s.id));
            }
        }
        let expert = &self.states[self.states.len() - 1];
        if expert.role != StateRole::Expert || expert.id != self.expert_id {
            return bad("last state must be the expert".into());
        }
        if self.states[0].role != StateRole::Naive {
            return bad("first state must be naive".into());
        }
        for (i, t) in self.transitions.iter().enumerate() {
            let from = &self.states[i];
            let to = &self.states[i + 1];
            if t.from_state_id != from.id || t.to_state_id != to.id {
                return bad(format!("transition {i} does not link states {i} and {}", i + 1));
            }
            if !t.validation_match || t.rejected {
                return bad(format!("transition {i} is not a validated forward edit"));
            }
            t.locus.check()?;
            t.effect.check()?;
            let mut expected: BTreeSet<&str> = from.action_set();
            expected.insert(&t.action_category);
            if expected != to.action_set() {
                return bad(format!("transition {i} action sets do not compose"));
            }
        }
        Ok(())
    }
}
