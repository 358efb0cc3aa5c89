use std::collections::BTreeSet;

use crate::lift::{DeclaredScope, LiftError, LiftRequest, LiftResponse, Lifter};
use crate::model::{Anchor, Carrier, CarrierKind, Intent, Precondition};

use super::LatticeSpec;

/// Deterministic lifter for sim clusters. The intent is the action id, the
/// anchor its locus tag, the carrier the first member's forward diff, and
/// the preconditions come from the lattice when the case payload carries
/// one, else from the prior actions common to all members.
#[derive(Debug, Clone, Default)]
pub struct SimLifter {
    /// Extra platforms to assert without evidence.
    pub declare_platforms: Vec<String>,
}

impl Lifter for SimLifter {
    fn lift(&self, req: &LiftRequest) -> Result<LiftResponse, LiftError> {
        let first = req.members.first().ok_or_else(|| LiftError::Rejected("empty cluster".into()))?;
        let action = &first.transition.action_category;
        let lattice_pre = req
            .cases
            .get(&first.case_id)
            .and_then(|v| serde_json::from_value::<LatticeSpec>(v.clone()).ok())
            .and_then(|spec| spec.action(action).map(|a| a.preconditions.clone()));
        let pre: Vec<String> = match lattice_pre {
            Some(p) => p,
            None => {
                let mut common: Option<BTreeSet<&String>> = None;
                for m in &req.members {
                    let set: BTreeSet<&String> = m.prior_actions.iter().collect();
                    common = Some(match common {
                        None => set,
                        Some(c) => c.intersection(&set).copied().collect(),
                    });
                }
                common.unwrap_or_default().into_iter().cloned().collect()
            }
        };
        Ok(LiftResponse {
            intent: Intent {
                name: action.clone(),
                description: format!("apply {action}"),
            },
            anchor: Anchor {
                structural_tag: first.transition.locus.structural_tag.clone(),
                symbol_glob: "*".into(),
            },
            carrier: Carrier {
                kind: CarrierKind::DiffSketch,
                body: first.transition.forward_diff.clone(),
            },
            pre: pre
                .into_iter()
                .map(|action| Precondition::RequiresAction { action })
                .collect(),
            declared_scope: DeclaredScope {
                platforms: self.declare_platforms.clone(),
                ..DeclaredScope::default()
            },
        })
    }
}

/// Serves one lift request; failures are reported as `{"error": ...}`.
pub fn serve_lifter(lifter: &SimLifter, input: &[u8]) -> Vec<u8> {
    let out = match serde_json::from_slice::<LiftRequest>(input) {
        Ok(req) => match lifter.lift(&req) {
            Ok(resp) => serde_json::to_value(resp).expect("response serializes"),
            Err(e) => serde_json::json!({ "error": e.to_string() }),
        },
        Err(e) => serde_json::json!({ "error": format!("malformed request: {e}") }),
    };
    serde_json::to_vec(&out).expect("json serializes")
}
