//! The full pipeline on one lattice: induce a lineage from the expert,
//! lift and admit skills, then optimize from the naive root with and
//! without the library.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::analytics::roundtrip_score;
use crate::cost::BudgetMeter;
use crate::deopt::{induce_lineage, DeoptConfig, DeoptEnv, DeoptError, Induction};
use crate::gate::{Gate, GateConfig};
use crate::library::{Library, Similarity};
use crate::lift::{
    admit_pending, cluster_by, lift_cluster, members_from_lineages, AdmissionConfig, AdmissionReport, HoldoutStart,
    LiftError, TrialEnv,
};
use crate::materialize::{optimize, Ablation, MaterializeError, OptimizeConfig, SessionState};
use crate::model::ModelError;

use super::{
    brute_force_best, case_spec, expert_state, holdout_case, holdout_pool, LatticeSpec, SimError, SimLifter,
    SimRewriter, SimRunner,
};

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Deopt(#[from] DeoptError),
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error(transparent)]
    Materialize(#[from] MaterializeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone)]
pub struct RecoveryConfig {
    pub gate: GateConfig,
    pub deopt: DeoptConfig,
    pub admission: AdmissionConfig,
    /// Shared by both sessions; the ablation only differs in its proposer.
    pub optimize: OptimizeConfig,
    pub ablation_seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            gate: GateConfig {
                reps: 3,
                ..GateConfig::default()
            },
            deopt: DeoptConfig::default(),
            admission: AdmissionConfig::default(),
            optimize: OptimizeConfig {
                max_submissions: 16,
                budget: rust_decimal::Decimal::new(2, 0),
                ..OptimizeConfig::default()
            },
            ablation_seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct RecoveryOutcome {
    pub induction: Induction,
    pub library: Library,
    pub admission: AdmissionReport,
    pub optimal_latency: f64,
    pub guided: SessionState,
    pub ablation: SessionState,
    pub guided_pass: bool,
    pub ablation_pass: bool,
}

fn passes(session: &SessionState, optimal: f64) -> bool {
    session
        .running_best
        .is_some_and(|b| roundtrip_score(b, optimal).unwrap_or(false))
}

/// Induced lineage, lifted skills and their admission results.
#[derive(Debug)]
pub struct BuiltLibrary {
    pub induction: Induction,
    pub library: Library,
    pub admission: AdmissionReport,
}

/// Induces a lineage from the lattice's expert, lifts every cluster and
/// admits the hypotheses on the held-out pool.
pub fn build_library(spec: &LatticeSpec, config: &RecoveryConfig) -> Result<BuiltLibrary, RecoveryError> {
    spec.check()?;
    let case = case_spec(spec, &spec.case);
    let gate = Gate::new(config.gate.clone(), Arc::new(SimRunner::new()));
    let rewriter = SimRewriter::new();

    let env = DeoptEnv {
        gate: &gate,
        rewriter: &rewriter,
        case: &case,
        config: &config.deopt,
    };
    let induction = induce_lineage(&expert_state(spec)?, &spec.registry(), &env, &format!("induce-{}", spec.case))?;
    let lineages = [induction.lineage.clone()];

    let cases = BTreeMap::from([(spec.case.clone(), case.payload.clone())]);
    let mut library = Library::new();
    for cluster in cluster_by(&members_from_lineages(&lineages), |m| &m.transition) {
        let card = lift_cluster(&cluster, &induction.risks, &cases, &SimLifter::default())?;
        library.insert(card)?;
    }

    let hcase = case_spec(spec, &holdout_case(spec));
    let starts: Vec<HoldoutStart> = holdout_pool(spec)?
        .into_iter()
        .map(|state| HoldoutStart {
            state,
            case: hcase.clone(),
        })
        .collect();
    let trial_env = TrialEnv {
        gate: &gate,
        rewriter: &rewriter,
        pricing: config.optimize.pricing,
    };
    let admission = admit_pending(
        &mut library,
        &|_| starts.clone(),
        &trial_env,
        &mut BudgetMeter::unlimited(),
        &config.admission,
    )?;
    Ok(BuiltLibrary {
        induction,
        library,
        admission,
    })
}

pub fn run_recovery(spec: &LatticeSpec, config: &RecoveryConfig) -> Result<RecoveryOutcome, RecoveryError> {
    let BuiltLibrary {
        induction,
        library,
        admission,
    } = build_library(spec, config)?;
    let case = case_spec(spec, &spec.case);
    let gate = Gate::new(config.gate.clone(), Arc::new(SimRunner::new()));
    let rewriter = SimRewriter::new();

    let (optimal_latency, _) = brute_force_best(spec, spec.actions.len())?;
    let root = induction.lineage.naive().expect("non-empty lineage").clone();
    let sim = Similarity::default();
    let guided = optimize(&case, root.clone(), &library, &rewriter, &gate, &sim, &config.optimize)?;
    let ablation_config = OptimizeConfig {
        ablation: Some(Ablation::GeneratedOnly {
            seed: config.ablation_seed,
        }),
        ..config.optimize.clone()
    };
    let ablation = optimize(&case, root, &library, &rewriter, &gate, &sim, &ablation_config)?;

    Ok(RecoveryOutcome {
        guided_pass: passes(&guided, optimal_latency),
        ablation_pass: passes(&ablation, optimal_latency),
        induction,
        library,
        admission,
        optimal_latency,
        guided,
        ablation,
    })
}
