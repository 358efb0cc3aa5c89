//! Random skill libraries for property tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use lineage_core::library::{Library, Target};
use lineage_core::model::{
    Anchor, Carrier, CarrierKind, EffectRange, EvidenceRef, Intent, RoundtripTrial, Scope, SkillCard, SkillStatus,
    TrialResult,
};
use rand::seq::IndexedRandom;
use rand::Rng;
use rust_decimal::Decimal;

pub const CASES: [&str; 6] = ["gemm-fp16", "gemm_bf16", "conv2d-fp16", "topk", "gdn-cumsum", "gdn-chunk/fwd"];
pub const LANGUAGES: [&str; 5] = ["cuda", "cpp", "triton", "tilelang", "hip"];
pub const PLATFORMS: [&str; 5] = ["sim", "nv-sm80", "nv-sm90", "nv-sm120", "amd-mi300"];
pub const ACTIONS: [&str; 6] = ["tile", "vectorize", "pipeline", "swizzle", "unroll", "fuse"];

fn subset<R: Rng>(rng: &mut R, pool: &[&str]) -> Vec<String> {
    pool.iter().filter(|_| rng.random_bool(0.4)).map(|s| s.to_string()).collect()
}

pub fn trial(skill_id: &str, n: usize, result: TrialResult, case: &str, lang: &str, platform: &str, actions: Vec<String>) -> RoundtripTrial {
    RoundtripTrial {
        id: format!("{skill_id}-trial-{n}"),
        skill_id: skill_id.to_string(),
        start_state_id: format!("start-{n}"),
        start_case_id: case.to_string(),
        start_language: lang.to_string(),
        start_platform: platform.to_string(),
        start_actions: actions,
        start_latency: 100.0,
        achieved_latency: Some(80.0),
        target_latency: 160.0,
        result,
        cost_dollars: Decimal::new(3, 2),
        transcript_ref: None,
    }
}

/// A card with one piece of evidence and a random verified scope. Statuses
/// are reached through trials, never by assignment.
pub fn random_card<R: Rng>(rng: &mut R, index: usize, status: SkillStatus) -> SkillCard {
    let id = format!("s{index:04}");
    let intent = *ACTIONS.choose(rng).unwrap();
    let case = *CASES.choose(rng).unwrap();
    let lang = *LANGUAGES.choose(rng).unwrap();
    let platform = *PLATFORMS.choose(rng).unwrap();
    let prior = subset(rng, &ACTIONS);
    let mut scope = Scope::default();
    let witness = format!("t{index}");
    if rng.random_bool(0.8) {
        scope.verify_case(case, &witness);
    }
    if rng.random_bool(0.8) {
        scope.verify_language(lang, &witness);
    }
    if rng.random_bool(0.8) {
        scope.verify_platform(platform, &witness);
    }
    if rng.random_bool(0.8) {
        scope.verify_prior_actions(&prior, &witness);
    }
    scope.declare_platform(PLATFORMS.choose(rng).unwrap());
    scope.declare_case(CASES.choose(rng).unwrap());
    let mut card = SkillCard {
        schema_version: 1,
        id: id.clone(),
        intent: Intent {
            name: intent.to_string(),
            description: String::new(),
        },
        anchor: Anchor {
            structural_tag: "loop_nest".into(),
            symbol_glob: "*".into(),
        },
        carrier: Carrier {
            kind: CarrierKind::DiffSketch,
            body: format!("+apply {intent}"),
        },
        pre: vec![],
        effect: EffectRange {
            min_ratio: 1.25,
            max_ratio: 1.25,
        },
        evidence: vec![EvidenceRef {
            transition_id: witness,
            action_category: intent.to_string(),
            from_state_id: format!("from{index}"),
            to_state_id: format!("to{index}"),
            latency_ratio: 1.25,
            case_id: case.to_string(),
            language: lang.to_string(),
            platform: platform.to_string(),
            prior_actions: prior.clone(),
        }],
        risk: vec![],
        scope,
        ver: vec![],
        status: SkillStatus::Hypothesis,
        extra: BTreeMap::new(),
    };
    let c2 = *CASES.choose(rng).unwrap();
    let l2 = *LANGUAGES.choose(rng).unwrap();
    let p2 = *PLATFORMS.choose(rng).unwrap();
    let a2 = subset(rng, &ACTIONS);
    match status {
        SkillStatus::Hypothesis => {
            for n in 0..rng.random_range(0..=2) {
                card.record_trial(trial(&id, n, TrialResult::Failure, c2, l2, p2, a2.clone()));
            }
        }
        SkillStatus::Admitted => {
            let fails = rng.random_range(0..=2);
            for n in 0..fails {
                card.record_trial(trial(&id, n, TrialResult::Failure, c2, l2, p2, a2.clone()));
            }
            card.record_trial(trial(&id, fails, TrialResult::Success, c2, l2, p2, a2));
        }
        SkillStatus::Retired => {
            for n in 0..3 {
                card.record_trial(trial(&id, n, TrialResult::Failure, c2, l2, p2, a2.clone()));
            }
            card.set_status(SkillStatus::Retired).unwrap();
        }
    }
    card
}

pub fn random_status<R: Rng>(rng: &mut R) -> SkillStatus {
    *[SkillStatus::Hypothesis, SkillStatus::Admitted, SkillStatus::Retired].choose(rng).unwrap()
}

pub fn random_library<R: Rng>(rng: &mut R, max_skills: usize) -> Library {
    let mut lib = Library::new();
    for i in 0..rng.random_range(1..=max_skills) {
        let status = random_status(rng);
        lib.insert(random_card(rng, i, status)).unwrap();
    }
    lib
}

pub fn random_target<R: Rng>(rng: &mut R) -> Target {
    Target {
        case_id: CASES.choose(rng).unwrap().to_string(),
        language: LANGUAGES.choose(rng).unwrap().to_string(),
        platform: PLATFORMS.choose(rng).unwrap().to_string(),
        applied_actions: subset(rng, &ACTIONS),
    }
}
