//! The online loop: retrieve admitted skills for the current best kernel,
//! materialize one per submission through the rewriter, gate every
//! candidate and meter spend against a hard budget.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{BudgetError, BudgetMeter, CostEvent, Pricing};
use crate::gate::{CaseSpec, Gate, GateError};
use crate::library::{retrieve, serialize_skillcard_prompt, Library, Similarity, Target};
use crate::model::{KernelState, ModelError, SkillCard, StateRole, ValidationStatus};
use crate::rewrite::{estimate_tokens, RewriteError, RewriteMode, RewriteRequest, RewriteResponse, Rewriter};

#[derive(Debug, Error)]
pub enum MaterializeError {
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
}

#[derive(Debug, Error)]
pub enum CallError {
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
}

/// Billing state of the session's stable prompt prefix: billed at the input
/// price on the first call, at the cached price afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixCache {
    pub tokens: u64,
    billed: bool,
}

impl PrefixCache {
    pub fn new(tokens: u64) -> Self {
        Self { tokens, billed: false }
    }
}

/// One rewriter call, charged to `meter`. Responses whose usage does not
/// already cover the prefix get the prefix added per the cache model.
pub fn rewriter_call(
    rewriter: &dyn Rewriter,
    request: &RewriteRequest,
    pricing: Pricing,
    meter: &mut BudgetMeter,
    prefix: &mut PrefixCache,
) -> Result<(RewriteResponse, CostEvent), CallError> {
    let resp = rewriter.rewrite(request)?;
    for w in &resp.warnings {
        log::warn!("rewriter: {w}");
    }
    let mut usage = resp.usage;
    if !usage.includes_prefix && prefix.tokens > 0 {
        if prefix.billed {
            usage.cached_input_tokens += prefix.tokens;
        } else {
            usage.input_tokens += prefix.tokens;
        }
    }
    let event = CostEvent::from_usage(&usage, pricing);
    meter.charge(&event)?;
    prefix.billed = true;
    Ok((resp, event))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    BudgetExhausted,
    Saturated,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Valid,
    Wrapper,
    CompileFail,
    Incorrect,
    Unvalidated,
    RewriterError,
    GateError,
}

impl From<ValidationStatus> for Verdict {
    fn from(s: ValidationStatus) -> Self {
        match s {
            ValidationStatus::Valid => Verdict::Valid,
            ValidationStatus::Wrapper => Verdict::Wrapper,
            ValidationStatus::CompileFail => Verdict::CompileFail,
            ValidationStatus::Incorrect => Verdict::Incorrect,
            ValidationStatus::Unvalidated => Verdict::Unvalidated,
        }
    }
}

/// One submission of the session, as written to `sessions/<id>.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionEvent {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skill_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_id: Option<String>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub apparent_latency_ms: Option<f64>,
    /// Reference latency over measured (or apparent) latency.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
    pub improved: bool,
    pub cumulative_dollars: Decimal,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub workload_id: String,
    pub root_state_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_latency: Option<f64>,
    pub prefix_tokens: u64,
    pub trajectory: Vec<SubmissionEvent>,
    /// Best creditable latency so far.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running_best: Option<f64>,
    /// The state the next submission builds on.
    pub best_state: KernelState,
    pub status: SessionStatus,
}

impl SessionState {
    pub fn cumulative_dollars(&self) -> Decimal {
        self.trajectory.last().map_or(Decimal::ZERO, |e| e.cumulative_dollars)
    }

    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.trajectory {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Ablation {
    /// Skills stripped of preconditions, anchors, carriers and risk: the
    /// agent only knows action names and proposes random un-applied ones.
    GeneratedOnly { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    pub k: usize,
    pub max_submissions: usize,
    /// Consecutive valid non-improving submissions before saturation.
    pub saturation_patience: usize,
    pub max_attempts_per_skill: usize,
    pub budget: Decimal,
    pub pricing: Pricing,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Ablation>,
    /// Latency speedups are reported against; the root's latency if unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_latency: Option<f64>,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            k: 4,
            max_submissions: 32,
            saturation_patience: 3,
            max_attempts_per_skill: 2,
            budget: Decimal::new(10, 0),
            pricing: Pricing::default(),
            ablation: None,
            reference_latency: None,
        }
    }
}

/// Stable session prefix: every retrievable skill card, serialized once.
pub fn session_prefix(library: &Library) -> String {
    let mut out = String::from("Admitted optimization skills for this workload.\n\n");
    for s in library.retrievable() {
        out.push_str(&serialize_skillcard_prompt(s));
        out.push('\n');
    }
    out
}

/// Greedy selection: the highest-ranked skill whose required prior actions
/// are all applied, that adds some action not yet applied, and that has
/// attempts left on the current best state.
pub fn select_skill<'a>(
    ranked: &[String],
    library: &'a Library,
    best: &KernelState,
    attempts: &BTreeMap<(String, String), usize>,
    max_attempts: usize,
) -> Option<&'a SkillCard> {
    let applied = best.action_set();
    ranked.iter().filter_map(|id| library.get(id)).find(|s| {
        s.required_prior_actions().iter().all(|a| applied.contains(a.as_str()))
            && !s.action_categories().iter().all(|a| applied.contains(a.as_str()))
            && attempts.get(&(s.id.clone(), best.id.clone())).copied().unwrap_or(0) < max_attempts
    })
}

fn risk_hint(skill: &SkillCard) -> Option<String> {
    if skill.risk.is_empty() {
        return None;
    }
    Some(
        skill
            .risk
            .iter()
            .take(5)
            .map(|r| format!("- {} at {}: {}", r.action_category, r.locus.structural_tag, r.violated_precondition.text))
            .collect::<Vec<_>>()
            .join("\n"),
    )
}

struct Proposal {
    key: String,
    skill_id: Option<String>,
    action: Option<String>,
    request: RewriteRequest,
    added: Vec<String>,
}

/// Runs one optimization session from `root`.
pub fn optimize(
    case: &CaseSpec,
    root: KernelState,
    library: &Library,
    rewriter: &dyn Rewriter,
    gate: &Gate,
    sim: &Similarity,
    config: &OptimizeConfig,
) -> Result<SessionState, MaterializeError> {
    let mut meter = BudgetMeter::new(config.budget)?;
    let root_record = match &root.validation {
        Some(v) if v.status != ValidationStatus::Unvalidated => v.clone(),
        _ => gate.validate_retrying(&root, case)?,
    };
    let root = root.with_validation(root_record.clone());
    let running_best = if root_record.is_creditable() { root_record.latency_ms } else { None };
    let reference = config.reference_latency.or(running_best);

    let generated_only = matches!(config.ablation, Some(Ablation::GeneratedOnly { .. }));
    let prefix_text = if generated_only {
        let names: BTreeSet<String> = library.retrievable().flat_map(|s| s.action_categories()).collect();
        format!("Known optimization names: {}\n", names.into_iter().collect::<Vec<_>>().join(", "))
    } else {
        session_prefix(library)
    };
    let mut prefix = PrefixCache::new(estimate_tokens(&prefix_text));
    let mut rng = match config.ablation {
        Some(Ablation::GeneratedOnly { seed }) => ChaCha8Rng::seed_from_u64(seed),
        None => ChaCha8Rng::seed_from_u64(0),
    };

    let mut session = SessionState {
        workload_id: case.id.clone(),
        root_state_id: root.id.clone(),
        reference_latency: reference,
        prefix_tokens: prefix.tokens,
        trajectory: Vec::new(),
        running_best,
        best_state: root,
        status: SessionStatus::Active,
    };
    let mut attempts: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut stale = 0usize;
    let admitted = library.retrievable().count();

    while session.status == SessionStatus::Active {
        if session.trajectory.len() >= config.max_submissions {
            session.status = SessionStatus::Done;
            break;
        }
        let best = session.best_state.clone();
        let proposal = if generated_only {
            propose_generated(library, &best, &attempts, &mut rng, &prefix_text)
        } else {
            propose_from_library(library, &best, &attempts, sim, config, admitted, &prefix_text)
        };
        let Some(proposal) = proposal else {
            session.status = SessionStatus::Saturated;
            break;
        };
        *attempts.entry((proposal.key.clone(), best.id.clone())).or_insert(0) += 1;

        let index = session.trajectory.len();
        let mut event = SubmissionEvent {
            index,
            skill_id: proposal.skill_id.clone(),
            action: proposal.action.clone(),
            state_id: None,
            verdict: Verdict::RewriterError,
            latency_ms: None,
            apparent_latency_ms: None,
            speedup: None,
            improved: false,
            cumulative_dollars: meter.spent(),
            detail: None,
        };
        let resp = match rewriter_call(rewriter, &proposal.request, config.pricing, &mut meter, &mut prefix) {
            Ok((resp, _)) => resp,
            Err(CallError::Budget(e)) => {
                log::info!("session {}: {e}", case.id);
                session.status = SessionStatus::BudgetExhausted;
                break;
            }
            Err(CallError::Rewrite(e)) => {
                event.detail = Some(e.to_string());
                session.trajectory.push(event);
                continue;
            }
        };
        event.cumulative_dollars = meter.spent();

        let mut applied = best.applied_actions.clone();
        for a in &proposal.added {
            if !applied.contains(a) {
                applied.push(a.clone());
            }
        }
        let candidate = match best.derive(resp.source, applied, StateRole::Candidate) {
            Ok(c) => c,
            Err(e) => {
                event.detail = Some(e.to_string());
                session.trajectory.push(event);
                continue;
            }
        };
        event.state_id = Some(candidate.id.clone());
        let record = match gate.validate_retrying(&candidate, case) {
            Ok(r) => r,
            Err(e) => {
                event.verdict = Verdict::GateError;
                event.detail = Some(e.to_string());
                session.trajectory.push(event);
                continue;
            }
        };
        event.verdict = record.status.into();
        event.latency_ms = record.latency_ms;
        event.apparent_latency_ms = record.apparent_latency_ms;
        event.detail = record.detail.clone();
        let shown = record.latency_ms.or(record.apparent_latency_ms);
        event.speedup = reference.zip(shown).map(|(r, l)| r / l);

        if record.is_creditable() {
            let latency = record.latency_ms.expect("valid record has latency");
            if session.running_best.is_none_or(|b| latency < b) {
                session.running_best = Some(latency);
                session.best_state = candidate.with_validation(record);
                event.improved = true;
                stale = 0;
            } else {
                stale += 1;
            }
        }
        session.trajectory.push(event);
        if stale >= config.saturation_patience {
            session.status = SessionStatus::Saturated;
        }
    }
    Ok(session)
}

fn propose_from_library(
    library: &Library,
    best: &KernelState,
    attempts: &BTreeMap<(String, String), usize>,
    sim: &Similarity,
    config: &OptimizeConfig,
    admitted: usize,
    prefix: &str,
) -> Option<Proposal> {
    let target = Target {
        case_id: best.case_id.clone(),
        language: best.language.clone(),
        platform: best.platform.clone(),
        applied_actions: best.applied_actions.clone(),
    };
    // Widen the pool when nothing retrieved is applicable.
    let mut k = config.k.max(1);
    let skill = loop {
        let ranked: Vec<String> = retrieve(library, &target, k, sim).into_iter().map(|r| r.skill_id).collect();
        if let Some(s) = select_skill(&ranked, library, best, attempts, config.max_attempts_per_skill) {
            break s;
        }
        if k >= admitted {
            return None;
        }
        k = (k * 2).min(admitted);
    };
    let tried = attempts.get(&(skill.id.clone(), best.id.clone())).copied().unwrap_or(0);
    let mut request = RewriteRequest::new(RewriteMode::Materialize, &best.source_text, &best.language, &best.platform);
    request.action_category = skill.action_categories().into_iter().next();
    request.locus = None;
    request.skill_prompt = Some(serialize_skillcard_prompt(skill));
    request.carrier = Some(skill.carrier.body.clone());
    request.prefix = prefix.to_string();
    if tried > 0 {
        request.retry_hint = risk_hint(skill);
    }
    Some(Proposal {
        key: skill.id.clone(),
        skill_id: Some(skill.id.clone()),
        action: request.action_category.clone(),
        added: skill.action_categories().into_iter().collect(),
        request,
    })
}

fn propose_generated(
    library: &Library,
    best: &KernelState,
    attempts: &BTreeMap<(String, String), usize>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
) -> Option<Proposal> {
    let applied = best.action_set();
    let names: BTreeSet<String> = library.retrievable().flat_map(|s| s.action_categories()).collect();
    let open: Vec<&String> = names
        .iter()
        .filter(|a| !applied.contains(a.as_str()))
        .filter(|a| !attempts.contains_key(&((*a).clone(), best.id.clone())))
        .collect();
    let action = (*open.choose(rng)?).clone();
    let mut request = RewriteRequest::new(RewriteMode::Materialize, &best.source_text, &best.language, &best.platform);
    request.action_category = Some(action.clone());
    request.skill_prompt = Some(format!("intent: {action}\n"));
    request.prefix = prefix.to_string();
    Some(Proposal {
        key: action.clone(),
        skill_id: None,
        action: Some(action.clone()),
        added: vec![action],
        request,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewrite::TokenUsage;

    struct Fixed(TokenUsage);

    impl Rewriter for Fixed {
        fn rewrite(&self, _: &RewriteRequest) -> Result<RewriteResponse, RewriteError> {
            Ok(RewriteResponse {
                source: "x".into(),
                usage: self.0,
                warnings: vec![],
            })
        }
    }

    #[test]
    fn prefix_billed_once_then_cached() {
        let rw = Fixed(TokenUsage {
            input_tokens: 0,
            cached_input_tokens: 0,
            output_tokens: 0,
            includes_prefix: false,
        });
        let req = RewriteRequest::new(RewriteMode::Add, "x", "sim", "sim");
        let mut meter = BudgetMeter::unlimited();
        let mut prefix = PrefixCache::new(1_000_000);
        let (_, first) = rewriter_call(&rw, &req, Pricing::default(), &mut meter, &mut prefix).unwrap();
        let (_, second) = rewriter_call(&rw, &req, Pricing::default(), &mut meter, &mut prefix).unwrap();
        assert_eq!(first.dollars, Decimal::new(5, 0));
        assert_eq!(second.dollars, Decimal::new(50, 2));
    }

    #[test]
    fn refused_charge_leaves_prefix_unbilled() {
        let rw = Fixed(TokenUsage::default());
        let req = RewriteRequest::new(RewriteMode::Add, "x", "sim", "sim");
        let mut meter = BudgetMeter::new(Decimal::new(1, 0)).unwrap();
        let mut prefix = PrefixCache::new(1_000_000);
        assert!(matches!(
            rewriter_call(&rw, &req, Pricing::default(), &mut meter, &mut prefix),
            Err(CallError::Budget(_))
        ));
        assert_eq!(meter.spent(), Decimal::ZERO);
        assert!(!prefix.billed);
    }
}
