//! Lifting forward transitions into skill hypotheses, and admitting
//! hypotheses through held-out roundtrip trials.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cost::{BudgetError, BudgetMeter, Pricing};
use crate::gate::{CaseSpec, Gate, GateError};
use crate::library::{serialize_skillcard_prompt, Library};
use crate::materialize::{rewriter_call, CallError, PrefixCache};
use crate::model::{
    Anchor, Carrier, EffectRange, EvidenceRef, ForwardTransition, Intent, KernelState, Lineage, ModelError,
    Precondition, RiskEvidence, RoundtripTrial, Scope, SkillCard, SkillStatus, StateRole, TrialResult,
};
use crate::process::exchange;
use crate::rewrite::{RewriteMode, RewriteRequest, Rewriter};

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("lift rejected: {0}")]
    Rejected(String),
    #[error("lifter protocol error: {0}")]
    Protocol(String),
    #[error("start state {0} appears in the skill's evidence")]
    HeldOutViolation(String),
    #[error("start state {0} does not validate")]
    InvalidStart(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
}

/// A forward transition with the context the lifter sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMember {
    pub transition: ForwardTransition,
    pub case_id: String,
    pub language: String,
    pub platform: String,
    /// Applied actions of the from-state.
    pub prior_actions: Vec<String>,
    /// Source of the from-state.
    pub context: String,
}

/// Every stored transition of `lineages` with its from-state context.
pub fn members_from_lineages(lineages: &[Lineage]) -> Vec<ClusterMember> {
    let mut out = Vec::new();
    for lin in lineages {
        for t in lin.transitions.iter().filter(|t| t.validation_match && !t.rejected) {
            let Some(from) = lin.state(&t.from_state_id) else { continue };
            out.push(ClusterMember {
                transition: t.clone(),
                case_id: from.case_id.clone(),
                language: from.language.clone(),
                platform: from.platform.clone(),
                prior_actions: from.applied_actions.clone(),
                context: from.source_text.clone(),
            });
        }
    }
    out
}

fn similar(a: &ForwardTransition, b: &ForwardTransition) -> bool {
    a.action_category == b.action_category
        && a.locus.structural_tag == b.locus.structural_tag
        && (a.effect.ratio_bucket - b.effect.ratio_bucket).abs() <= 1
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Transitive closure of the similarity relation. Clusters are sorted by
/// action category then smallest transition id; members by transition id.
/// Duplicate transition ids collapse to one member.
pub fn cluster_by<T: Clone>(items: &[T], transition: impl Fn(&T) -> &ForwardTransition) -> Vec<Vec<T>> {
    let mut unique: BTreeMap<&str, &T> = BTreeMap::new();
    for it in items {
        unique.entry(transition(it).id.as_str()).or_insert(it);
    }
    let items: Vec<&T> = unique.into_values().collect();
    let mut parent: Vec<usize> = (0..items.len()).collect();
    for i in 0..items.len() {
        for j in (i + 1)..items.len() {
            if similar(transition(items[i]), transition(items[j])) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<T>> = BTreeMap::new();
    for (i, &item) in items.iter().enumerate() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(item.clone());
    }
    let mut clusters: Vec<Vec<T>> = groups.into_values().collect();
    clusters.sort_by(|a, b| {
        let (ta, tb) = (transition(&a[0]), transition(&b[0]));
        ta.action_category.cmp(&tb.action_category).then_with(|| ta.id.cmp(&tb.id))
    });
    clusters
}

pub fn aggregate_transitions(transitions: &[ForwardTransition]) -> Vec<Vec<ForwardTransition>> {
    cluster_by(transitions, |t| t)
}

/// What the lifter is shown for one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftRequest {
    pub members: Vec<ClusterMember>,
    #[serde(default)]
    pub risk: Vec<RiskEvidence>,
    /// Runner payloads of the cases involved, keyed by case id.
    #[serde(default)]
    pub cases: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeclaredScope {
    #[serde(default)]
    pub cases: Vec<String>,
    #[serde(default)]
    pub languages: Vec<String>,
    #[serde(default)]
    pub platforms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiftResponse {
    pub intent: Intent,
    pub anchor: Anchor,
    pub carrier: Carrier,
    #[serde(default)]
    pub pre: Vec<Precondition>,
    #[serde(default)]
    pub declared_scope: DeclaredScope,
}

pub trait Lifter: Send + Sync {
    fn lift(&self, request: &LiftRequest) -> Result<LiftResponse, LiftError>;
}

pub fn parse_lift_response(bytes: &[u8]) -> Result<LiftResponse, LiftError> {
    let text = std::str::from_utf8(bytes).map_err(|e| LiftError::Protocol(format!("response is not UTF-8: {e}")))?;
    serde_json::from_str(text.trim()).map_err(|e| LiftError::Protocol(format!("malformed lift response: {e}")))
}

/// A lifter spawned as an external command: one JSON request on stdin, one
/// JSON response on stdout.
#[derive(Debug, Clone)]
pub struct ProcessLifter {
    pub argv: Vec<String>,
    pub timeout: Duration,
}

impl Lifter for ProcessLifter {
    fn lift(&self, request: &LiftRequest) -> Result<LiftResponse, LiftError> {
        let input = serde_json::to_vec(request).map_err(|e| LiftError::Protocol(e.to_string()))?;
        let out = exchange(&self.argv, &input, self.timeout).map_err(|e| LiftError::Protocol(e.to_string()))?;
        parse_lift_response(&out.stdout)
    }
}

/// Lifts one cluster into a hypothesis. The lifter supplies intent, anchor,
/// carrier and preconditions; evidence, effect, risk and verified scope are
/// filled here from the cluster itself.
pub fn lift_cluster(
    members: &[ClusterMember],
    risk: &[RiskEvidence],
    cases: &BTreeMap<String, Value>,
    lifter: &dyn Lifter,
) -> Result<SkillCard, LiftError> {
    if members.is_empty() {
        return Err(LiftError::Rejected("empty cluster".into()));
    }
    let categories: BTreeSet<&str> = members.iter().map(|m| m.transition.action_category.as_str()).collect();
    let relevant_risk: Vec<RiskEvidence> = risk
        .iter()
        .filter(|r| categories.contains(r.action_category.as_str()))
        .cloned()
        .collect();
    let request = LiftRequest {
        members: members.to_vec(),
        risk: relevant_risk.clone(),
        cases: cases
            .iter()
            .filter(|(id, _)| members.iter().any(|m| &m.case_id == *id))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    };
    let resp = lifter.lift(&request)?;
    if resp.carrier.body.trim().is_empty() {
        return Err(LiftError::Rejected("lifter returned an empty carrier".into()));
    }
    if resp.intent.name.trim().is_empty() || resp.anchor.structural_tag.trim().is_empty() {
        return Err(LiftError::Rejected("lifter returned an empty intent or anchor".into()));
    }

    let mut scope = Scope::default();
    let mut evidence = Vec::new();
    for m in members {
        let t = &m.transition;
        scope.verify_case(&m.case_id, &t.id);
        scope.verify_language(&m.language, &t.id);
        scope.verify_platform(&m.platform, &t.id);
        scope.verify_prior_actions(&m.prior_actions, &t.id);
        evidence.push(EvidenceRef {
            transition_id: t.id.clone(),
            action_category: t.action_category.clone(),
            from_state_id: t.from_state_id.clone(),
            to_state_id: t.to_state_id.clone(),
            latency_ratio: t.effect.latency_ratio,
            case_id: m.case_id.clone(),
            language: m.language.clone(),
            platform: m.platform.clone(),
            prior_actions: m.prior_actions.clone(),
        });
    }
    for c in &resp.declared_scope.cases {
        scope.declare_case(c);
    }
    for l in &resp.declared_scope.languages {
        scope.declare_language(l);
    }
    for p in &resp.declared_scope.platforms {
        scope.declare_platform(p);
    }
    scope.prior_actions_required = resp
        .pre
        .iter()
        .filter_map(|p| match p {
            Precondition::RequiresAction { action } => Some(action.clone()),
            Precondition::Condition { .. } => None,
        })
        .collect();

    let effect = EffectRange::from_ratios(evidence.iter().map(|e: &EvidenceRef| e.latency_ratio))
        .expect("non-empty cluster");
    let id = SkillCard::derive_id(&resp.intent.name, &resp.anchor.structural_tag, &scope.signature(), &resp.carrier);
    let card = SkillCard {
        schema_version: crate::model::SCHEMA_VERSION,
        id,
        intent: resp.intent,
        anchor: resp.anchor,
        carrier: resp.carrier,
        pre: resp.pre,
        effect,
        evidence,
        risk: relevant_risk,
        scope,
        ver: Vec::new(),
        status: SkillStatus::Hypothesis,
        extra: BTreeMap::new(),
    };
    crate::model::Document::check(&card)?;
    Ok(card)
}

/// Admission window around the observed effect range.
pub fn trial_window(effect: &EffectRange) -> (f64, f64) {
    (effect.min_ratio / 2.0, effect.max_ratio * 2.0)
}

/// Everything a roundtrip trial needs besides the skill and start.
pub struct TrialEnv<'a> {
    pub gate: &'a Gate,
    pub rewriter: &'a dyn Rewriter,
    pub pricing: Pricing,
}

/// Materializes `skill` on a held-out `start` and records whether it
/// reproduces the expected effect.
pub fn run_roundtrip(
    skill: &SkillCard,
    start: &KernelState,
    case: &CaseSpec,
    env: &TrialEnv,
    meter: &mut BudgetMeter,
    attempt: usize,
) -> Result<RoundtripTrial, LiftError> {
    if skill
        .evidence
        .iter()
        .any(|e| e.from_state_id == start.id || e.to_state_id == start.id)
    {
        return Err(LiftError::HeldOutViolation(start.id.clone()));
    }
    let start_latency = match start.latency() {
        Some(l) if start.validation.as_ref().is_some_and(|v| v.is_creditable()) => l,
        _ => {
            let rec = env.gate.validate_retrying(start, case)?;
            match (rec.is_creditable(), rec.latency_ms) {
                (true, Some(l)) => l,
                _ => return Err(LiftError::InvalidStart(start.id.clone())),
            }
        }
    };
    let (lo, _) = trial_window(&skill.effect);
    let mut trial = RoundtripTrial {
        id: RoundtripTrial::trial_id(&skill.id, &start.id, attempt),
        skill_id: skill.id.clone(),
        start_state_id: start.id.clone(),
        start_case_id: start.case_id.clone(),
        start_language: start.language.clone(),
        start_platform: start.platform.clone(),
        start_actions: start.applied_actions.clone(),
        start_latency,
        achieved_latency: None,
        target_latency: start_latency / lo,
        result: TrialResult::Failure,
        cost_dollars: Decimal::ZERO,
        transcript_ref: None,
    };

    let mut req = RewriteRequest::new(RewriteMode::Materialize, &start.source_text, &start.language, &start.platform);
    req.action_category = skill.action_categories().into_iter().next();
    req.skill_prompt = Some(serialize_skillcard_prompt(skill));
    req.carrier = Some(skill.carrier.body.clone());
    let before = meter.spent();
    let mut prefix = PrefixCache::new(0);
    let resp = match rewriter_call(env.rewriter, &req, env.pricing, meter, &mut prefix) {
        Ok((resp, _)) => resp,
        Err(CallError::Budget(e)) => return Err(e.into()),
        Err(CallError::Rewrite(e)) => {
            log::info!("trial {} on {}: rewriter failed: {e}", skill.id, start.id);
            trial.cost_dollars = meter.spent() - before;
            return Ok(trial);
        }
    };
    trial.cost_dollars = meter.spent() - before;

    let mut applied = start.applied_actions.clone();
    for a in skill.action_categories() {
        if !applied.contains(&a) {
            applied.push(a);
        }
    }
    let candidate = match start.derive(resp.source, applied, StateRole::Candidate) {
        Ok(c) => c,
        Err(_) => return Ok(trial),
    };
    let rec = match env.gate.validate_retrying(&candidate, case) {
        Ok(r) => r,
        Err(e) => {
            log::info!("trial {} on {}: gate error {e}", skill.id, start.id);
            return Ok(trial);
        }
    };
    if let (true, Some(l)) = (rec.is_creditable(), rec.latency_ms) {
        trial.achieved_latency = Some(l);
        let ratio = start_latency / l;
        let (lo, hi) = trial_window(&skill.effect);
        if ratio >= lo && ratio <= hi {
            trial.result = TrialResult::Success;
        }
    }
    Ok(trial)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionOutcome {
    Admitted,
    StillHypothesis,
    Retired,
    SkippedNoHoldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissionEntry {
    pub skill_id: String,
    pub intent: String,
    pub trials: usize,
    pub successes: usize,
    pub outcome: AdmissionOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdmissionReport {
    pub entries: Vec<AdmissionEntry>,
    pub cost_dollars: Decimal,
}

impl AdmissionReport {
    pub fn count(&self, outcome: AdmissionOutcome) -> usize {
        self.entries.iter().filter(|e| e.outcome == outcome).count()
    }

    pub fn render_table(&self) -> String {
        let mut out = String::from("| skill | intent | trials | successes | outcome |\n|---|---|---|---|---|\n");
        for e in &self.entries {
            let outcome = serde_json::to_value(e.outcome)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            out.push_str(&format!(
                "| {} | {} | {} | {} | {outcome} |\n",
                &e.skill_id[..e.skill_id.len().min(12)],
                e.intent,
                e.trials,
                e.successes
            ));
        }
        out.push_str(&format!(
            "\nadmitted {}, hypothesis {}, retired {}, skipped {}; cost ${}\n",
            self.count(AdmissionOutcome::Admitted),
            self.count(AdmissionOutcome::StillHypothesis),
            self.count(AdmissionOutcome::Retired),
            self.count(AdmissionOutcome::SkippedNoHoldout),
            self.cost_dollars
        ));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmissionConfig {
    pub max_trials: usize,
}

impl Default for AdmissionConfig {
    fn default() -> Self {
        Self { max_trials: 3 }
    }
}

/// A fresh start state and the case it is measured under.
#[derive(Debug, Clone)]
pub struct HoldoutStart {
    pub state: KernelState,
    pub case: CaseSpec,
}

/// Orders candidate starts: those meeting the skill's required prior
/// actions and lacking its action first, then the rest; ties by state id.
fn rank_starts<'a>(skill: &SkillCard, starts: &'a [HoldoutStart]) -> Vec<&'a HoldoutStart> {
    let required = skill.required_prior_actions();
    let actions = skill.action_categories();
    let used: BTreeSet<&str> = skill.ver.iter().map(|t| t.start_state_id.as_str()).collect();
    let mut ranked: Vec<(bool, &HoldoutStart)> = starts
        .iter()
        .filter(|s| !used.contains(s.state.id.as_str()))
        .filter(|s| {
            !skill
                .evidence
                .iter()
                .any(|e| e.from_state_id == s.state.id || e.to_state_id == s.state.id)
        })
        .map(|s| {
            let have = s.state.action_set();
            let fits = required.iter().all(|r| have.contains(r.as_str()))
                && !actions.iter().all(|a| have.contains(a.as_str()));
            (!fits, s)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.state.id.cmp(&b.1.state.id)));
    ranked.into_iter().map(|(_, s)| s).collect()
}

/// Runs up to `max_trials` roundtrips per hypothesis on distinct held-out
/// starts. A hypothesis with no success after `max_trials` trials is
/// retired; one with no usable start is skipped untouched.
pub fn admit_pending(
    library: &mut Library,
    starts: &dyn Fn(&SkillCard) -> Vec<HoldoutStart>,
    env: &TrialEnv,
    meter: &mut BudgetMeter,
    config: &AdmissionConfig,
) -> Result<AdmissionReport, LiftError> {
    let before = meter.spent();
    let mut report = AdmissionReport::default();
    let pending: Vec<SkillCard> = library.with_status(SkillStatus::Hypothesis).cloned().collect();
    for mut skill in pending {
        let pool = starts(&skill);
        let ranked = rank_starts(&skill, &pool);
        if ranked.is_empty() {
            report.entries.push(AdmissionEntry {
                skill_id: skill.id.clone(),
                intent: skill.intent.name.clone(),
                trials: skill.ver.len(),
                successes: 0,
                outcome: AdmissionOutcome::SkippedNoHoldout,
            });
            continue;
        }
        for start in ranked {
            if skill.ver.len() >= config.max_trials || skill.has_success() {
                break;
            }
            let attempt = skill.ver.len();
            let trial = match run_roundtrip(&skill, &start.state, &start.case, env, meter, attempt) {
                Ok(t) => t,
                Err(LiftError::InvalidStart(id)) => {
                    log::warn!("holdout start {id} does not validate; skipped");
                    continue;
                }
                Err(e) => return Err(e),
            };
            skill.record_trial(trial);
        }
        if !skill.has_success() && skill.ver.len() >= config.max_trials {
            skill.set_status(SkillStatus::Retired)?;
        }
        let successes = skill.ver.iter().filter(|t| t.result == TrialResult::Success).count();
        let outcome = match skill.status {
            SkillStatus::Admitted => AdmissionOutcome::Admitted,
            SkillStatus::Retired => AdmissionOutcome::Retired,
            SkillStatus::Hypothesis => AdmissionOutcome::StillHypothesis,
        };
        report.entries.push(AdmissionEntry {
            skill_id: skill.id.clone(),
            intent: skill.intent.name.clone(),
            trials: skill.ver.len(),
            successes,
            outcome,
        });
        library.replace(skill)?;
    }
    report.cost_dollars = meter.spent() - before;
    Ok(report)
}
