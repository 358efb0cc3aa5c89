use std::sync::Arc;

use lineage_core::deopt::{induce_lineage, propose_simplifications, replay_lineage, verify_replay, DeoptConfig, DeoptEnv, DeoptError};
use lineage_core::gate::{CaseSpec, Gate, GateConfig, ScriptedRunner};
use lineage_core::model::{FailureKind, KernelState, StateRole};
use lineage_core::rewrite::{RewriteMode, ScriptedRewriter};
use lineage_core::registry::{ActionInfo, ActionRegistry};
use lineage_core::sim::{case_spec, expert_state, generate_random_lattice, LatticeAction, LatticeSpec, SimRewriter, SimRunner};

fn gate() -> Gate {
    Gate::new(
        GateConfig {
            reps: 3,
            ..GateConfig::default()
        },
        Arc::new(SimRunner::new()),
    )
}

#[test]
fn chain3_induces_full_lineage() {
    let spec = LatticeSpec::chain3();
    let case = case_spec(&spec, &spec.case);
    let gate = gate();
    let rewriter = SimRewriter::new();
    let config = DeoptConfig::default();
    let env = DeoptEnv {
        gate: &gate,
        rewriter: &rewriter,
        case: &case,
        config: &config,
    };
    let ind = induce_lineage(&expert_state(&spec).unwrap(), &spec.registry(), &env, "run-0").unwrap();
    let l = &ind.lineage;
    assert_eq!(l.states.len(), 4);
    assert_eq!(l.transitions.len(), 3);
    let order: Vec<&str> = l.transitions.iter().map(|t| t.action_category.as_str()).collect();
    assert_eq!(order, ["tile", "vectorize", "pipeline"]);
    assert_eq!(l.states[0].role, StateRole::Naive);
    assert_eq!(l.states[3].role, StateRole::Expert);
    let lat: Vec<f64> = l.states.iter().map(|s| s.latency().unwrap()).collect();
    assert_eq!(lat, [1000.0, 500.0, 400.0, 280.0]);
    assert!(l.transitions.iter().all(|t| t.validation_match && t.rederived_diff.is_none()));
    assert!(ind.cost_dollars > rust_decimal::Decimal::ZERO);

    let texts = replay_lineage(l).unwrap();
    assert_eq!(texts.last().unwrap(), &l.states[3].source_text);
    verify_replay(l, &gate, &case).unwrap();
}

#[test]
fn replay_detects_tampered_diff() {
    let spec = LatticeSpec::chain3();
    let case = case_spec(&spec, &spec.case);
    let gate = gate();
    let rewriter = SimRewriter::new();
    let config = DeoptConfig::default();
    let env = DeoptEnv {
        gate: &gate,
        rewriter: &rewriter,
        case: &case,
        config: &config,
    };
    let mut l = induce_lineage(&expert_state(&spec).unwrap(), &spec.registry(), &env, "r").unwrap().lineage;
    l.transitions.swap(0, 1);
    assert!(matches!(replay_lineage(&l), Err(DeoptError::ReplayMismatch { .. })));
}

#[test]
fn soft_order_is_advisory() {
    // The registry claims b relies on a; the lattice says a needs b.
    let spec = LatticeSpec::new(
        100.0,
        vec![
            LatticeAction::new("a", 0.5, &["b"], "loop_nest"),
            LatticeAction::new("b", 0.8, &[], "smem_stage"),
        ],
    );
    let mut reg = ActionRegistry::empty();
    reg.register(ActionInfo::new("a", "loop_nest"));
    reg.register(ActionInfo::new("b", "smem_stage").requires(&["a"]));

    let expert = expert_state(&spec).unwrap();
    assert_eq!(expert.applied_actions, ["b", "a"]);
    let case = case_spec(&spec, &spec.case);
    let gate = gate();
    let mut validated = expert.clone();
    validated = validated.with_validation(gate.validate(&expert, &case).unwrap());
    let props = propose_simplifications(&validated, &reg, &reg.soft_order()).unwrap();
    assert_eq!(props[0].action_category, "b");
    assert!(!props[0].violates_soft_order);
    assert!(props[1].violates_soft_order);

    let rewriter = SimRewriter::new();
    let config = DeoptConfig::default();
    let env = DeoptEnv {
        gate: &gate,
        rewriter: &rewriter,
        case: &case,
        config: &config,
    };
    let ind = induce_lineage(&expert, &reg, &env, "r").unwrap();
    let order: Vec<&str> = ind.lineage.transitions.iter().map(|t| t.action_category.as_str()).collect();
    assert_eq!(order, ["b", "a"]);
    let first = &ind.risks[0];
    assert_eq!(first.action_category, "b");
    assert_eq!(first.observed_failure, FailureKind::Incorrect);
    assert_eq!(first.violated_precondition.missing_actions, ["b"]);
}

fn scripted_env_parts(programs: &[(&str, f64)]) -> (Gate, CaseSpec) {
    let mut runner = ScriptedRunner::new();
    for (src, l) in programs {
        runner = runner.program(src, *l);
    }
    let gate = Gate::new(
        GateConfig {
            reps: 3,
            ..GateConfig::default()
        },
        Arc::new(runner),
    );
    (gate, CaseSpec::new("case"))
}

fn kernel(src: &str, actions: &[&str]) -> KernelState {
    let applied = actions.iter().map(|a| a.to_string()).collect();
    KernelState::new(src, "cuda", "nv-sm90", "case", applied, StateRole::Expert).unwrap()
}

#[test]
fn implausible_speedup_on_removal_is_rejected() {
    // Removing "bad" makes the kernel faster, so its inverse is not an
    // optimization.
    let (gate, case) = scripted_env_parts(&[("E", 75.0), ("G", 50.0), ("B", 150.0), ("N", 100.0)]);
    let rewriter = ScriptedRewriter::new()
        .edit(RewriteMode::Remove, "bad", "E", "G")
        .edit(RewriteMode::Remove, "good", "E", "B")
        .edit(RewriteMode::Add, "good", "B", "E")
        .edit(RewriteMode::Remove, "bad", "B", "N");
    let mut reg = ActionRegistry::empty();
    reg.ensure("good", "loop_nest");
    reg.ensure("bad", "smem_stage");
    let config = DeoptConfig::default();
    let env = DeoptEnv {
        gate: &gate,
        rewriter: &rewriter,
        case: &case,
        config: &config,
    };
    let ind = induce_lineage(&kernel("E", &["good", "bad"]), &reg, &env, "r").unwrap();
    let slower: Vec<&str> = ind
        .risks
        .iter()
        .filter(|r| r.observed_failure == FailureKind::Slower)
        .map(|r| r.action_category.as_str())
        .collect();
    assert_eq!(slower, ["bad", "bad"]);
    assert_eq!(ind.lineage.transitions.len(), 1);
    assert_eq!(ind.lineage.transitions[0].action_category, "good");
    assert!((ind.lineage.transitions[0].effect.latency_ratio - 2.0).abs() < 1e-12);
}

#[test]
fn nothing_removable_yields_empty_lineage_with_risks() {
    let (gate, case) = scripted_env_parts(&[("E", 200.0), ("N", 100.0)]);
    let rewriter = ScriptedRewriter::new().edit(RewriteMode::Remove, "slow", "E", "N");
    let mut reg = ActionRegistry::empty();
    reg.ensure("slow", "loop_nest");
    let config = DeoptConfig::default();
    let env = DeoptEnv {
        gate: &gate,
        rewriter: &rewriter,
        case: &case,
        config: &config,
    };
    match induce_lineage(&kernel("E", &["slow"]), &reg, &env, "r") {
        Err(DeoptError::EmptyLineage { risks, .. }) => {
            assert_eq!(risks.len(), 1);
            assert_eq!(risks[0].observed_failure, FailureKind::Slower);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn random_lattices_replay_exactly() {
    for seed in 0..5 {
        let spec = generate_random_lattice(seed, 8, 4).unwrap();
        let case = case_spec(&spec, &spec.case);
        let gate = gate();
        let rewriter = SimRewriter::new();
        let config = DeoptConfig::default();
        let env = DeoptEnv {
            gate: &gate,
            rewriter: &rewriter,
            case: &case,
            config: &config,
        };
        let l = induce_lineage(&expert_state(&spec).unwrap(), &spec.registry(), &env, "r").unwrap().lineage;
        assert_eq!(l.transitions.len(), 8, "seed {seed}");
        assert!(l.states[0].applied_actions.is_empty());
        verify_replay(&l, &gate, &case).unwrap();
    }
}
