//! De-optimization: walk an expert kernel backward one gated simplification
//! at a time, re-derive each accepted step as a forward edit, and emit the
//! resulting lineage together with evidence from rejected steps.

use std::collections::BTreeMap;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{BudgetMeter, Pricing};
use crate::diff::{apply_diff, make_diff};
use crate::gate::{CaseSpec, Gate, GateError};
use crate::materialize::{rewriter_call, CallError, PrefixCache};
use crate::model::{
    digest_state, Document, EffectSignature, FailureKind, ForwardTransition, KernelState, Lineage, Locus,
    ModelError, RiskEvidence, StateRole, ValidationRecord, ValidationStatus, ViolatedPrecondition,
};
use crate::registry::{ActionRegistry, SoftOrder};
use crate::rewrite::{RewriteMode, RewriteRequest, Rewriter};

#[derive(Debug, Error)]
pub enum DeoptError {
    #[error("state {0} has no applied actions to remove")]
    NothingToRemove(String),
    #[error("state {0} is not a validated expert or intermediate state")]
    NotSimplifiable(String),
    #[error("expert {0} does not pass the gate")]
    ExpertInvalid(String),
    #[error("no simplification of {expert_id} was accepted")]
    EmptyLineage {
        expert_id: String,
        risks: Vec<RiskEvidence>,
    },
    #[error("forward re-derivation of {action} failed after {attempts} attempts")]
    ForwardDerivationFailed { action: String, attempts: usize },
    #[error("replay diverges at transition {index}: {detail}")]
    ReplayMismatch { index: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gate(#[from] GateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplificationProposal {
    pub action_category: String,
    pub locus: Locus,
    pub rationale: String,
    /// Lower ranks are tried first.
    pub soft_order_rank: usize,
    pub violates_soft_order: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeoptConfig {
    pub max_steps: usize,
    pub max_rejections_per_state: usize,
    pub plausibility_slack: f64,
    pub forward_retries: usize,
    pub pricing: Pricing,
}

impl Default for DeoptConfig {
    fn default() -> Self {
        Self {
            max_steps: 64,
            max_rejections_per_state: 5,
            plausibility_slack: 0.05,
            forward_retries: 3,
            pricing: Pricing::default(),
        }
    }
}

fn locus_for(state: &KernelState, action: &str, registry: &ActionRegistry) -> Locus {
    let tag = registry.get(action).map_or("other", |a| a.structural_tag.as_str());
    Locus::tagged(&state.case_id, tag)
}

/// Ranks removals of the applied actions. Actions no other applied action
/// depends on come first; removals that violate the soft order are kept but
/// ranked last. Within each group: reverse application order, then id.
pub fn propose_simplifications(
    state: &KernelState,
    registry: &ActionRegistry,
    soft_order: &SoftOrder,
) -> Result<Vec<SimplificationProposal>, DeoptError> {
    if !matches!(state.role, StateRole::Expert | StateRole::Intermediate) || !state.is_valid() {
        return Err(DeoptError::NotSimplifiable(state.id.clone()));
    }
    if state.applied_actions.is_empty() {
        return Err(DeoptError::NothingToRemove(state.id.clone()));
    }
    let mut keyed: Vec<((bool, usize, &str), SimplificationProposal)> = state
        .applied_actions
        .iter()
        .enumerate()
        .map(|(pos, a)| {
            let dependents: Vec<&str> = state
                .applied_actions
                .iter()
                .filter(|b| *b != a && soft_order.depends_on(b, a))
                .map(String::as_str)
                .collect();
            let violates = !dependents.is_empty();
            let rationale = if violates {
                format!("remove {a}; still relied on by {}", dependents.join(", "))
            } else {
                format!("remove {a}; no applied action relies on it")
            };
            (
                (violates, usize::MAX - pos, a.as_str()),
                SimplificationProposal {
                    action_category: a.clone(),
                    locus: locus_for(state, a, registry),
                    rationale,
                    soft_order_rank: 0,
                    violates_soft_order: violates,
                },
            )
        })
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(keyed
        .into_iter()
        .enumerate()
        .map(|(rank, (_, mut p))| {
            p.soft_order_rank = rank;
            p
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackwardOutcome {
    Accepted(KernelState),
    Rejected(RiskEvidence),
}

/// Shared collaborators of one induction run.
pub struct DeoptEnv<'a> {
    pub gate: &'a Gate,
    pub rewriter: &'a dyn Rewriter,
    pub case: &'a CaseSpec,
    pub config: &'a DeoptConfig,
}

fn failure_kind(status: ValidationStatus) -> FailureKind {
    match status {
        ValidationStatus::CompileFail => FailureKind::CompileFail,
        ValidationStatus::Wrapper => FailureKind::Wrapper,
        ValidationStatus::Incorrect | ValidationStatus::Unvalidated | ValidationStatus::Valid => FailureKind::Incorrect,
    }
}

fn risk(state: &KernelState, p: &SimplificationProposal, kind: FailureKind, text: String, missing: Vec<String>) -> RiskEvidence {
    RiskEvidence {
        action_category: p.action_category.clone(),
        locus: p.locus.clone(),
        violated_precondition: ViolatedPrecondition {
            text,
            missing_actions: missing,
        },
        observed_failure: kind,
        source_state_id: state.id.clone(),
    }
}

/// Asks the rewriter to remove one action and accepts the result only if
/// it passes the gate and is not implausibly faster than `state`.
pub fn apply_backward(
    state: &KernelState,
    proposal: &SimplificationProposal,
    env: &DeoptEnv,
    meter: &mut BudgetMeter,
) -> Result<BackwardOutcome, DeoptError> {
    let action = &proposal.action_category;
    if !state.has_action(action) {
        return Err(DeoptError::NotSimplifiable(format!("{} (no action {action})", state.id)));
    }
    let reject = |kind, text: String, missing| Ok(BackwardOutcome::Rejected(risk(state, proposal, kind, text, missing)));
    let req = RewriteRequest::new(RewriteMode::Remove, &state.source_text, &state.language, &state.platform)
        .action(action, Some(proposal.locus.clone()));
    let resp = match rewriter_call(env.rewriter, &req, env.config.pricing, meter, &mut PrefixCache::new(0)) {
        Ok((r, _)) => r,
        Err(CallError::Rewrite(e)) => return reject(FailureKind::CompileFail, format!("rewriter error: {e}"), vec![]),
        Err(CallError::Budget(e)) => return reject(FailureKind::CompileFail, format!("budget: {e}"), vec![]),
    };
    let applied: Vec<String> = state.applied_actions.iter().filter(|a| *a != action).cloned().collect();
    let candidate = match state.derive(resp.source, applied, StateRole::Intermediate) {
        Ok(c) => c,
        Err(e) => return reject(FailureKind::CompileFail, e.to_string(), vec![]),
    };
    let rec = match env.gate.validate_retrying(&candidate, env.case) {
        Ok(r) => r,
        Err(e @ GateError::Timeout { .. }) => return reject(FailureKind::CompileFail, format!("gate: {e}"), vec![]),
        Err(e) => return Err(e.into()),
    };
    if !rec.is_creditable() {
        let text = rec.detail.clone().unwrap_or_else(|| format!("{:?}", rec.status));
        let missing = if rec.status == ValidationStatus::Incorrect { vec![action.clone()] } else { vec![] };
        return reject(failure_kind(rec.status), text, missing);
    }
    let (new, old) = (rec.latency_ms.expect("valid"), state.latency().expect("validated state"));
    if new < old * (1.0 - env.config.plausibility_slack) {
        return reject(
            FailureKind::Slower,
            format!("simplified program is faster ({new} ms vs {old} ms); inverse step would slow the kernel down"),
            vec![],
        );
    }
    Ok(BackwardOutcome::Accepted(candidate.with_validation(rec)))
}

/// Re-derives the forward edit `prev -> next` and stores it only if the
/// result validates with a latency within the plausibility slack of `next`.
pub fn operationalize_forward(
    prev: &KernelState,
    next: &KernelState,
    proposal: &SimplificationProposal,
    expert_id: &str,
    env: &DeoptEnv,
    meter: &mut BudgetMeter,
) -> Result<ForwardTransition, DeoptError> {
    let action = &proposal.action_category;
    let (prev_l, next_l) = match (prev.latency(), next.latency()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(DeoptError::NotSimplifiable(prev.id.clone())),
    };
    let mut applied = prev.applied_actions.clone();
    applied.push(action.clone());
    for attempt in 0..env.config.forward_retries {
        let req = RewriteRequest::new(RewriteMode::Add, &prev.source_text, &prev.language, &prev.platform)
            .action(action, Some(proposal.locus.clone()));
        let resp = match rewriter_call(env.rewriter, &req, env.config.pricing, meter, &mut PrefixCache::new(0)) {
            Ok((r, _)) => r,
            Err(e) => {
                log::debug!("forward {action} attempt {attempt}: {e}");
                continue;
            }
        };
        let Ok(derived) = prev.derive(resp.source, applied.clone(), next.role) else { continue };
        let rec = match env.gate.validate_retrying(&derived, env.case) {
            Ok(r) => r,
            Err(e) => {
                log::debug!("forward {action} attempt {attempt}: {e}");
                continue;
            }
        };
        let matches = rec.is_creditable()
            && rec
                .latency_ms
                .is_some_and(|l| (l - next_l).abs() <= env.config.plausibility_slack * next_l);
        if !matches {
            log::debug!("forward {action} attempt {attempt}: status {:?} does not match", rec.status);
            continue;
        }
        let forward_diff = make_diff(&prev.source_text, &next.source_text);
        let rederived_diff =
            (derived.source_text != next.source_text).then(|| make_diff(&prev.source_text, &derived.source_text));
        return Ok(ForwardTransition {
            id: ForwardTransition::transition_id(&prev.id, &next.id, action),
            from_state_id: prev.id.clone(),
            to_state_id: next.id.clone(),
            action_category: action.clone(),
            locus: proposal.locus.clone(),
            forward_diff,
            rederived_diff,
            effect: EffectSignature::from_latencies(prev_l, next_l)?,
            origin_expert_id: expert_id.to_string(),
            validation_match: true,
            rejected: false,
        });
    }
    Err(DeoptError::ForwardDerivationFailed {
        action: action.clone(),
        attempts: env.config.forward_retries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeoptEventKind {
    Propose,
    Accept,
    Reject,
    ForwardFailed,
}

/// One record of `events/<run_id>.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeoptEvent {
    pub run_id: String,
    pub step: usize,
    pub kind: DeoptEventKind,
    pub state_id: String,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<ValidationStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
    pub cumulative_dollars: Decimal,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Induction {
    pub lineage: Lineage,
    pub risks: Vec<RiskEvidence>,
    pub events: Vec<DeoptEvent>,
    pub cost_dollars: Decimal,
}

/// Builds a lineage from `expert` by repeated gated simplification until no
/// actions remain, `max_steps` is reached, or a state collects
/// `max_rejections_per_state` consecutive rejections.
pub fn induce_lineage(
    expert: &KernelState,
    registry: &ActionRegistry,
    env: &DeoptEnv,
    run_id: &str,
) -> Result<Induction, DeoptError> {
    let soft_order = registry.soft_order();
    let mut meter = BudgetMeter::unlimited();
    let mut expert = expert.clone();
    expert.role = StateRole::Expert;
    let rec = match &expert.validation {
        Some(v) if v.is_creditable() => v.clone(),
        _ => env.gate.validate_retrying(&expert, env.case)?,
    };
    if !rec.is_creditable() {
        return Err(DeoptError::ExpertInvalid(expert.id.clone()));
    }
    let expert = expert.with_validation(rec);
    let expert_id = expert.id.clone();

    let mut states = vec![expert];
    let mut transitions: Vec<ForwardTransition> = Vec::new();
    let mut risks = Vec::new();
    let mut events = Vec::new();
    let mut event = |step: usize, kind, state: &KernelState, action: &str, rec: Option<&ValidationRecord>, detail: Option<String>, spent| {
        events.push(DeoptEvent {
            run_id: run_id.to_string(),
            step,
            kind,
            state_id: state.id.clone(),
            action: action.to_string(),
            verdict: rec.map(|r| r.status),
            latency_ms: rec.and_then(|r| r.latency_ms),
            cumulative_dollars: spent,
            detail,
        });
    };

    for step in 0..env.config.max_steps {
        let current = states.last().expect("non-empty").clone();
        if current.applied_actions.is_empty() {
            break;
        }
        let proposals = propose_simplifications(&current, registry, &soft_order)?;
        let mut rejections = 0;
        let mut accepted = false;
        for p in &proposals {
            if rejections >= env.config.max_rejections_per_state {
                break;
            }
            event(step, DeoptEventKind::Propose, &current, &p.action_category, None, Some(p.rationale.clone()), meter.spent());
            match apply_backward(&current, p, env, &mut meter)? {
                BackwardOutcome::Rejected(r) => {
                    rejections += 1;
                    let detail = format!("{:?}: {}", r.observed_failure, r.violated_precondition.text);
                    event(step, DeoptEventKind::Reject, &current, &p.action_category, None, Some(detail), meter.spent());
                    risks.push(r);
                }
                BackwardOutcome::Accepted(prev) => {
                    match operationalize_forward(&prev, &current, p, &expert_id, env, &mut meter) {
                        Ok(t) => {
                            event(step, DeoptEventKind::Accept, &prev, &p.action_category, prev.validation.as_ref(), None, meter.spent());
                            transitions.push(t);
                            states.push(prev);
                            accepted = true;
                            break;
                        }
                        Err(DeoptError::ForwardDerivationFailed { .. }) => {
                            rejections += 1;
                            event(step, DeoptEventKind::ForwardFailed, &prev, &p.action_category, prev.validation.as_ref(), None, meter.spent());
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        if !accepted {
            break;
        }
    }

    if transitions.is_empty() {
        return Err(DeoptError::EmptyLineage { expert_id, risks });
    }
    states.reverse();
    transitions.reverse();
    let last = states.len() - 1;
    for (i, s) in states.iter_mut().enumerate() {
        s.role = match i {
            0 => StateRole::Naive,
            i if i == last => StateRole::Expert,
            _ => StateRole::Intermediate,
        };
    }
    let first = &states[0];
    let lineage = Lineage {
        schema_version: crate::model::SCHEMA_VERSION,
        expert_id,
        case_id: first.case_id.clone(),
        language: first.language.clone(),
        platform: first.platform.clone(),
        states,
        transitions,
        extra: BTreeMap::new(),
    };
    lineage.check()?;
    Ok(Induction {
        lineage,
        risks,
        events,
        cost_dollars: meter.spent(),
    })
}

/// Applies the stored forward diffs in order starting from the naive
/// state's text and checks every intermediate digest against the stored
/// states. Returns the replayed program texts.
pub fn replay_lineage(lineage: &Lineage) -> Result<Vec<String>, DeoptError> {
    let naive = lineage.naive().ok_or_else(|| ModelError::InvalidLineage("no states".into()))?;
    let mut text = naive.source_text.clone();
    let mut texts = vec![text.clone()];
    for (i, t) in lineage.transitions.iter().enumerate() {
        text = apply_diff(&text, &t.forward_diff).map_err(|e| DeoptError::ReplayMismatch {
            index: i,
            detail: e.to_string(),
        })?;
        let id = digest_state(&text, &lineage.language, &lineage.platform, &lineage.case_id)?;
        let stored = &lineage.states[i + 1];
        if id != t.to_state_id || id != stored.id {
            return Err(DeoptError::ReplayMismatch {
                index: i,
                detail: format!("replayed digest {id} vs stored {}", stored.id),
            });
        }
        texts.push(text.clone());
    }
    Ok(texts)
}

/// Replays the lineage and re-measures every state through `gate`,
/// requiring latencies identical to the stored ones.
pub fn verify_replay(lineage: &Lineage, gate: &Gate, case: &CaseSpec) -> Result<(), DeoptError> {
    replay_lineage(lineage)?;
    for (i, s) in lineage.states.iter().enumerate() {
        let rec = gate.validate(s, case)?;
        if rec.latency_ms != s.latency() {
            return Err(DeoptError::ReplayMismatch {
                index: i,
                detail: format!("latency {:?} vs stored {:?}", rec.latency_ms, s.latency()),
            });
        }
    }
    Ok(())
}
