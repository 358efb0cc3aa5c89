use std::collections::{BTreeMap, BTreeSet};

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{digest_fields, schema_version, Document, ModelError, Result, RiskEvidence};
use crate::registry::ActionRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Declared,
    Verified,
}

/// One scope value with its provenance. Verified entries name the evidence
/// transitions or roundtrip trials that witness them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeEntry {
    pub value: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub witnesses: Vec<String>,
}

/// An observed (or asserted) prior-action context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorActionEntry {
    pub actions: Vec<String>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub witnesses: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scope {
    #[serde(default)]
    pub cases: Vec<ScopeEntry>,
    #[serde(default)]
    pub languages: Vec<ScopeEntry>,
    #[serde(default)]
    pub platforms: Vec<ScopeEntry>,
    #[serde(default)]
    pub prior_actions: Vec<PriorActionEntry>,
    #[serde(default)]
    pub prior_actions_required: Vec<String>,
    #[serde(default)]
    pub prior_actions_forbidden: Vec<String>,
}

fn add_entry(entries: &mut Vec<ScopeEntry>, value: &str, provenance: Provenance, witness: Option<&str>) {
    if let Some(e) = entries.iter_mut().find(|e| e.value == value) {
        if provenance == Provenance::Verified {
            e.provenance = Provenance::Verified;
        }
        if let Some(w) = witness {
            if !e.witnesses.iter().any(|x| x == w) {
                e.witnesses.push(w.to_string());
            }
        }
        return;
    }
    entries.push(ScopeEntry {
        value: value.to_string(),
        provenance,
        witnesses: witness.map(|w| vec![w.to_string()]).unwrap_or_default(),
    });
}

fn merge_entries(into: &mut Vec<ScopeEntry>, from: &[ScopeEntry]) {
    for e in from {
        if e.witnesses.is_empty() {
            add_entry(into, &e.value, e.provenance, None);
        }
        for w in &e.witnesses {
            add_entry(into, &e.value, e.provenance, Some(w));
        }
    }
}

impl Scope {
    pub fn verify_case(&mut self, value: &str, witness: &str) {
        add_entry(&mut self.cases, value, Provenance::Verified, Some(witness));
    }

    pub fn verify_language(&mut self, value: &str, witness: &str) {
        add_entry(&mut self.languages, value, Provenance::Verified, Some(witness));
    }

    pub fn verify_platform(&mut self, value: &str, witness: &str) {
        add_entry(&mut self.platforms, value, Provenance::Verified, Some(witness));
    }

    pub fn declare_case(&mut self, value: &str) {
        add_entry(&mut self.cases, value, Provenance::Declared, None);
    }

    pub fn declare_language(&mut self, value: &str) {
        add_entry(&mut self.languages, value, Provenance::Declared, None);
    }

    pub fn declare_platform(&mut self, value: &str) {
        add_entry(&mut self.platforms, value, Provenance::Declared, None);
    }

    pub fn verify_prior_actions(&mut self, actions: &[String], witness: &str) {
        let key: BTreeSet<&String> = actions.iter().collect();
        if let Some(e) = self
            .prior_actions
            .iter_mut()
            .find(|e| e.actions.iter().collect::<BTreeSet<_>>() == key)
        {
            e.provenance = Provenance::Verified;
            if !e.witnesses.iter().any(|x| x == witness) {
                e.witnesses.push(witness.to_string());
            }
            return;
        }
        self.prior_actions.push(PriorActionEntry {
            actions: actions.to_vec(),
            provenance: Provenance::Verified,
            witnesses: vec![witness.to_string()],
        });
    }

    pub fn verified_cases(&self) -> impl Iterator<Item = &str> {
        verified(&self.cases)
    }

    pub fn verified_languages(&self) -> impl Iterator<Item = &str> {
        verified(&self.languages)
    }

    pub fn verified_platforms(&self) -> impl Iterator<Item = &str> {
        verified(&self.platforms)
    }

    pub fn verified_prior_actions(&self) -> impl Iterator<Item = &[String]> {
        self.prior_actions
            .iter()
            .filter(|e| e.provenance == Provenance::Verified)
            .map(|e| e.actions.as_slice())
    }

    pub fn has_verified(&self) -> bool {
        self.verified_cases().next().is_some()
            || self.verified_languages().next().is_some()
            || self.verified_platforms().next().is_some()
            || self.verified_prior_actions().next().is_some()
    }

    /// Drops every verified entry, leaving declared ones.
    pub fn strip_verified(&mut self) {
        let keep = |e: &ScopeEntry| e.provenance == Provenance::Declared;
        self.cases.retain(keep);
        self.languages.retain(keep);
        self.platforms.retain(keep);
        self.prior_actions.retain(|e| e.provenance == Provenance::Declared);
    }

    /// Canonical text of the case / language / platform values, used for
    /// duplicate detection.
    pub fn signature(&self) -> String {
        let join = |entries: &[ScopeEntry]| {
            let set: BTreeSet<&str> = entries.iter().map(|e| e.value.as_str()).collect();
            set.into_iter().collect::<Vec<_>>().join(",")
        };
        format!(
            "c={};l={};p={}",
            join(&self.cases),
            join(&self.languages),
            join(&self.platforms)
        )
    }

    pub fn check(&self) -> Result<()> {
        let entries = self.cases.iter().chain(&self.languages).chain(&self.platforms);
        for e in entries {
            if e.provenance == Provenance::Verified && e.witnesses.is_empty() {
                return Err(ModelError::InvalidSkill(format!(
                    "verified scope entry {} has no witness",
                    e.value
                )));
            }
        }
        for e in &self.prior_actions {
            if e.provenance == Provenance::Verified && e.witnesses.is_empty() {
                return Err(ModelError::InvalidSkill("verified prior-action entry has no witness".into()));
            }
        }
        Ok(())
    }
}

fn verified(entries: &[ScopeEntry]) -> impl Iterator<Item = &str> {
    entries
        .iter()
        .filter(|e| e.provenance == Provenance::Verified)
        .map(|e| e.value.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent {
    pub name: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub structural_tag: String,
    #[serde(default)]
    pub symbol_glob: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarrierKind {
    DiffSketch,
    Pseudocode,
    AnnotatedSnippet,
    ScheduleFragment,
    NlAnnotation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Carrier {
    pub kind: CarrierKind,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Precondition {
    RequiresAction { action: String },
    Condition { text: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectRange {
    pub min_ratio: f64,
    pub max_ratio: f64,
}

impl EffectRange {
    pub fn from_ratios(ratios: impl IntoIterator<Item = f64>) -> Option<Self> {
        let mut range: Option<Self> = None;
        for r in ratios {
            range = Some(match range {
                None => Self { min_ratio: r, max_ratio: r },
                Some(x) => Self {
                    min_ratio: x.min_ratio.min(r),
                    max_ratio: x.max_ratio.max(r),
                },
            });
        }
        range
    }

    pub fn include(&mut self, ratio: f64) {
        self.min_ratio = self.min_ratio.min(ratio);
        self.max_ratio = self.max_ratio.max(ratio);
    }

    pub fn contains(&self, ratio: f64) -> bool {
        ratio >= self.min_ratio && ratio <= self.max_ratio
    }
}

/// Self-contained reference to an evidence transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRef {
    pub transition_id: String,
    pub action_category: String,
    pub from_state_id: String,
    pub to_state_id: String,
    pub latency_ratio: f64,
    pub case_id: String,
    pub language: String,
    pub platform: String,
    #[serde(default)]
    pub prior_actions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialResult {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundtripTrial {
    pub id: String,
    pub skill_id: String,
    pub start_state_id: String,
    pub start_case_id: String,
    pub start_language: String,
    pub start_platform: String,
    #[serde(default)]
    pub start_actions: Vec<String>,
    pub start_latency: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub achieved_latency: Option<f64>,
    /// Slowest achieved latency that still reproduces the expected effect.
    pub target_latency: f64,
    pub result: TrialResult,
    pub cost_dollars: Decimal,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript_ref: Option<String>,
}

impl RoundtripTrial {
    pub fn observed_ratio(&self) -> Option<f64> {
        self.achieved_latency.map(|a| self.start_latency / a)
    }

    pub fn trial_id(skill_id: &str, start_state_id: &str, attempt: usize) -> String {
        digest_fields("roundtrip-trial/v1", &[skill_id, start_state_id, &attempt.to_string()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillStatus {
    Hypothesis,
    Admitted,
    Retired,
}

/// A skill hypothesis or admitted skill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillCard {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub id: String,
    pub intent: Intent,
    pub anchor: Anchor,
    pub carrier: Carrier,
    #[serde(default)]
    pub pre: Vec<Precondition>,
    pub effect: EffectRange,
    pub evidence: Vec<EvidenceRef>,
    #[serde(default)]
    pub risk: Vec<RiskEvidence>,
    pub scope: Scope,
    #[serde(default)]
    pub ver: Vec<RoundtripTrial>,
    pub status: SkillStatus,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl SkillCard {
    pub fn derive_id(intent: &str, structural_tag: &str, scope_signature: &str, carrier: &Carrier) -> String {
        let kind = serde_json::to_string(&carrier.kind).unwrap_or_default();
        digest_fields(
            "skill-card/v1",
            &[intent, structural_tag, scope_signature, &kind, &carrier.body],
        )
    }

    /// Duplicate-detection key: intent name, anchor tag, scope signature and
    /// carrier. Cards equal under this key are merged on store.
    pub fn dedup_key(&self) -> String {
        Self::derive_id(
            &self.intent.name,
            &self.anchor.structural_tag,
            &self.scope.signature(),
            &self.carrier,
        )
    }

    pub fn is_admitted(&self) -> bool {
        self.status == SkillStatus::Admitted
    }

    pub fn has_success(&self) -> bool {
        self.ver.iter().any(|t| t.result == TrialResult::Success)
    }

    /// Action ids the current state must already contain before this skill
    /// may be materialized.
    pub fn required_prior_actions(&self) -> BTreeSet<String> {
        let mut set: BTreeSet<String> = self.scope.prior_actions_required.iter().cloned().collect();
        for p in &self.pre {
            if let Precondition::RequiresAction { action } = p {
                set.insert(action.clone());
            }
        }
        set
    }

    /// Action categories this skill restores, from its evidence.
    pub fn action_categories(&self) -> BTreeSet<String> {
        self.evidence.iter().map(|e| e.action_category.clone()).collect()
    }

    pub fn best_ratio(&self) -> Option<f64> {
        self.evidence
            .iter()
            .map(|e| e.latency_ratio)
            .chain(self.ver.iter().filter(|t| t.result == TrialResult::Success).filter_map(|t| t.observed_ratio()))
            .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))))
    }

    /// Moves along hypothesis -> admitted -> retired; never backwards.
    pub fn set_status(&mut self, to: SkillStatus) -> Result<()> {
        use SkillStatus::*;
        let ok = matches!(
            (self.status, to),
            (Hypothesis, Admitted) | (Hypothesis, Retired) | (Admitted, Retired)
        ) || self.status == to;
        if !ok {
            return Err(ModelError::IllegalStatusTransition { from: self.status, to });
        }
        if to == Admitted && !self.has_success() {
            return Err(ModelError::InvalidSkill("cannot admit without a successful trial".into()));
        }
        self.status = to;
        Ok(())
    }

    /// Appends a trial to the verification log. A success admits a
    /// hypothesis, widens the effect range and verifies the trial's context.
    pub fn record_trial(&mut self, trial: RoundtripTrial) {
        if trial.result == TrialResult::Success {
            if let Some(r) = trial.observed_ratio() {
                self.effect.include(r);
            }
            self.scope.verify_case(&trial.start_case_id, &trial.id);
            self.scope.verify_language(&trial.start_language, &trial.id);
            self.scope.verify_platform(&trial.start_platform, &trial.id);
            self.scope.verify_prior_actions(&trial.start_actions, &trial.id);
        }
        let success = trial.result == TrialResult::Success;
        self.ver.push(trial);
        if success && self.status == SkillStatus::Hypothesis {
            self.status = SkillStatus::Admitted;
        }
    }

    /// Checks that every action id named in `pre` is in the vocabulary.
    pub fn check_vocabulary(&self, registry: &ActionRegistry) -> Result<()> {
        for a in self.required_prior_actions() {
            if !registry.contains(&a) {
                return Err(ModelError::InvalidSkill(format!("unknown action {a} in preconditions")));
            }
        }
        Ok(())
    }

    /// Merges evidence, risk and verification lists from a duplicate card.
    pub fn merge_from(&mut self, other: &SkillCard) {
        for e in &other.evidence {
            if !self.evidence.iter().any(|x| x.transition_id == e.transition_id) {
                self.evidence.push(e.clone());
                self.effect.include(e.latency_ratio);
            }
        }
        for r in &other.risk {
            if !self.risk.contains(r) {
                self.risk.push(r.clone());
            }
        }
        for t in &other.ver {
            if !self.ver.iter().any(|x| x.id == t.id) {
                self.record_trial(t.clone());
            }
        }
        merge_entries(&mut self.scope.cases, &other.scope.cases);
        merge_entries(&mut self.scope.languages, &other.scope.languages);
        merge_entries(&mut self.scope.platforms, &other.scope.platforms);
        for e in &other.scope.prior_actions {
            for w in &e.witnesses {
                self.scope.verify_prior_actions(&e.actions, w);
            }
        }
        if other.status > self.status && (other.status != SkillStatus::Admitted || self.has_success()) {
            self.status = other.status;
        }
    }
}

impl Document for SkillCard {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }

    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidSkill(m.to_string()));
        if self.evidence.is_empty() {
            return bad("evidence is empty");
        }
        if self.carrier.body.is_empty() {
            return bad("carrier body is empty");
        }
        if !(self.effect.min_ratio > 0.0) || self.effect.min_ratio > self.effect.max_ratio {
            return bad("effect range must satisfy 0 < min <= max");
        }
        match self.status {
            SkillStatus::Admitted if !self.has_success() => return bad("admitted without a successful trial"),
            SkillStatus::Hypothesis if self.has_success() => return bad("hypothesis with a successful trial"),
            _ => {}
        }
        self.scope.check()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn card() -> SkillCard {
        let mut scope = Scope::default();
        scope.verify_case("c1", "t1");
        SkillCard {
            schema_version: 1,
            id: "s1".into(),
            intent: Intent {
                name: "vectorize".into(),
                description: String::new(),
            },
            anchor: Anchor {
                structural_tag: "global_memory_op".into(),
                symbol_glob: "*".into(),
            },
            carrier: Carrier {
                kind: CarrierKind::DiffSketch,
                body: "+apply vectorize".into(),
            },
            pre: vec![Precondition::RequiresAction { action: "tile".into() }],
            effect: EffectRange {
                min_ratio: 1.25,
                max_ratio: 1.25,
            },
            evidence: vec![EvidenceRef {
                transition_id: "t1".into(),
                action_category: "vectorize".into(),
                from_state_id: "a".into(),
                to_state_id: "b".into(),
                latency_ratio: 1.25,
                case_id: "c1".into(),
                language: "sim".into(),
                platform: "sim".into(),
                prior_actions: vec!["tile".into()],
            }],
            risk: vec![],
            scope,
            ver: vec![],
            status: SkillStatus::Hypothesis,
            extra: BTreeMap::new(),
        }
    }

    fn trial(result: TrialResult) -> RoundtripTrial {
        RoundtripTrial {
            id: format!("tr-{result:?}"),
            skill_id: "s1".into(),
            start_state_id: "z".into(),
            start_case_id: "c1-holdout".into(),
            start_language: "sim".into(),
            start_platform: "sim".into(),
            start_actions: vec!["tile".into()],
            start_latency: 500.0,
            achieved_latency: Some(400.0),
            target_latency: 800.0,
            result,
            cost_dollars: Decimal::new(1, 2),
            transcript_ref: None,
        }
    }

    #[test]
    fn status_only_moves_forward() {
        let mut c = card();
        assert!(c.set_status(SkillStatus::Admitted).is_err());
        c.record_trial(trial(TrialResult::Failure));
        assert_eq!(c.status, SkillStatus::Hypothesis);
        c.record_trial(trial(TrialResult::Success));
        assert_eq!(c.status, SkillStatus::Admitted);
        assert_eq!(c.ver.len(), 2);
        c.set_status(SkillStatus::Retired).unwrap();
        assert!(matches!(
            c.set_status(SkillStatus::Hypothesis),
            Err(ModelError::IllegalStatusTransition { .. })
        ));
        assert!(c.set_status(SkillStatus::Admitted).is_err());
    }

    #[test]
    fn admission_requires_success_on_load() {
        let mut c = card();
        c.status = SkillStatus::Admitted;
        assert!(c.check().is_err());
        c.record_trial(trial(TrialResult::Success));
        assert!(c.check().is_ok());
    }

    #[test]
    fn successful_trial_verifies_its_context() {
        let mut c = card();
        c.record_trial(trial(TrialResult::Success));
        assert!(c.scope.verified_cases().any(|x| x == "c1-holdout"));
        assert!(c.effect.contains(1.25));
        c.scope.check().unwrap();
    }

    #[test]
    fn empty_carrier_or_evidence_rejected() {
        let mut c = card();
        c.carrier.body.clear();
        assert!(c.check().is_err());
        let mut c = card();
        c.evidence.clear();
        assert!(c.check().is_err());
    }

    #[test]
    fn vocabulary_check() {
        let c = card();
        let mut reg = ActionRegistry::empty();
        assert!(c.check_vocabulary(&reg).is_err());
        reg.ensure("tile", "loop_nest");
        assert!(c.check_vocabulary(&reg).is_ok());
    }

    #[test]
    fn strip_verified_clears_verified_scope() {
        let mut c = card();
        c.scope.declare_platform("nv-sm120");
        c.scope.strip_verified();
        assert!(!c.scope.has_verified());
        assert_eq!(c.scope.platforms.len(), 1);
    }
}
