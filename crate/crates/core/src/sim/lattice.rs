use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::registry::{ActionInfo, ActionRegistry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeAction {
    pub id: String,
    /// Multiplicative latency effect in (0, 1].
    pub effect_factor: f64,
    #[serde(default)]
    pub preconditions: Vec<String>,
    #[serde(default = "default_locus_tag")]
    pub locus_tag: String,
}

fn default_locus_tag() -> String {
    "other".to_string()
}

fn sim() -> String {
    "sim".to_string()
}

impl LatticeAction {
    pub fn new(id: &str, effect_factor: f64, preconditions: &[&str], locus_tag: &str) -> Self {
        Self {
            id: id.to_string(),
            effect_factor,
            preconditions: preconditions.iter().map(|s| s.to_string()).collect(),
            locus_tag: locus_tag.to_string(),
        }
    }
}

/// A precondition DAG over actions with multiplicative latency effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub base_latency: f64,
    pub actions: Vec<LatticeAction>,
    #[serde(default = "sim")]
    pub case: String,
    #[serde(default = "sim")]
    pub language: String,
    #[serde(default = "sim")]
    pub platform: String,
    /// Latency of the reference implementation; a wrapper that falls back to
    /// the reference runs at this latency. Defaults to `base_latency`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_latency: Option<f64>,
}

/// Result of evaluating a set of applied actions.
#[derive(Debug, Clone, PartialEq)]
pub enum SimOutcome {
    Latency(f64),
    /// Some applied action is missing a precondition.
    Incorrect { action: String, missing: Vec<String> },
}

impl LatticeSpec {
    pub fn new(base_latency: f64, actions: Vec<LatticeAction>) -> Self {
        Self {
            base_latency,
            actions,
            case: sim(),
            language: sim(),
            platform: sim(),
            reference_latency: None,
        }
    }

    /// The three-action chain tile -> vectorize -> pipeline.
    pub fn chain3() -> Self {
        Self::new(
            1000.0,
            vec![
                LatticeAction::new("tile", 0.5, &[], "loop_nest"),
                LatticeAction::new("vectorize", 0.8, &["tile"], "global_memory_op"),
                LatticeAction::new("pipeline", 0.7, &["vectorize"], "smem_stage"),
            ],
        )
    }

    pub fn action(&self, id: &str) -> Option<&LatticeAction> {
        self.actions.iter().find(|a| a.id == id)
    }

    pub fn reference(&self) -> f64 {
        self.reference_latency.unwrap_or(self.base_latency)
    }

    pub fn check(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidSpec(m));
        if !(self.base_latency > 0.0) || !self.base_latency.is_finite() {
            return bad(format!("base latency {} must be positive", self.base_latency));
        }
        if let Some(r) = self.reference_latency {
            if !(r > 0.0) || !r.is_finite() {
                return bad(format!("reference latency {r} must be positive"));
            }
        }
        let mut ids = BTreeSet::new();
        for a in &self.actions {
            if !super::program::valid_action_id(&a.id) {
                return bad(format!("invalid action id {:?}", a.id));
            }
            if !ids.insert(a.id.as_str()) {
                return bad(format!("duplicate action {}", a.id));
            }
            if !(a.effect_factor > 0.0 && a.effect_factor <= 1.0) {
                return bad(format!("effect factor {} of {} outside (0, 1]", a.effect_factor, a.id));
            }
        }
        for a in &self.actions {
            for p in &a.preconditions {
                if !ids.contains(p.as_str()) {
                    return bad(format!("{} requires unknown action {p}", a.id));
                }
            }
        }
        self.topological_order().map(|_| ())
    }

    /// All actions in a valid application order (Kahn, smallest id first).
    pub fn topological_order(&self) -> Result<Vec<String>, SimError> {
        let mut remaining: BTreeMap<&str, BTreeSet<&str>> = self
            .actions
            .iter()
            .map(|a| (a.id.as_str(), a.preconditions.iter().map(String::as_str).collect()))
            .collect();
        let mut order = Vec::new();
        while !remaining.is_empty() {
            let next = remaining
                .iter()
                .find(|(_, pre)| pre.iter().all(|p| !remaining.contains_key(p)))
                .map(|(id, _)| *id)
                .ok_or(SimError::Cyclic)?;
            remaining.remove(next);
            order.push(next.to_string());
        }
        Ok(order)
    }

    /// Transitive precondition closure of `id`, excluding `id`, in
    /// application order.
    pub fn closure(&self, id: &str) -> Result<Vec<String>, SimError> {
        let mut needed = BTreeSet::new();
        let mut stack = vec![id.to_string()];
        while let Some(cur) = stack.pop() {
            let a = self.action(&cur).ok_or_else(|| SimError::InvalidAction(cur.clone()))?;
            for p in &a.preconditions {
                if needed.insert(p.clone()) {
                    stack.push(p.clone());
                }
            }
        }
        Ok(self
            .topological_order()?
            .into_iter()
            .filter(|a| needed.contains(a))
            .collect())
    }

    /// Latency of a program with `applied` actions, or a correctness failure
    /// when an action's preconditions are not all applied.
    pub fn sim_latency<S: AsRef<str>>(&self, applied: &[S]) -> Result<SimOutcome, SimError> {
        let set: BTreeSet<&str> = applied.iter().map(AsRef::as_ref).collect();
        for id in &set {
            if self.action(id).is_none() {
                return Err(SimError::InvalidAction(id.to_string()));
            }
        }
        let mut latency = self.base_latency;
        // Declaration order keeps the floating-point product independent of
        // the order actions were applied in.
        for a in &self.actions {
            if !set.contains(a.id.as_str()) {
                continue;
            }
            let missing: Vec<String> = a
                .preconditions
                .iter()
                .filter(|p| !set.contains(p.as_str()))
                .cloned()
                .collect();
            if !missing.is_empty() {
                return Ok(SimOutcome::Incorrect { action: a.id.clone(), missing });
            }
            latency *= a.effect_factor;
        }
        Ok(SimOutcome::Latency(latency))
    }

    /// Latency with every action applied.
    pub fn expert_latency(&self) -> Result<f64, SimError> {
        let all: Vec<&str> = self.actions.iter().map(|a| a.id.as_str()).collect();
        match self.sim_latency(&all)? {
            SimOutcome::Latency(l) => Ok(l),
            SimOutcome::Incorrect { .. } => unreachable!("full action set satisfies every precondition"),
        }
    }

    /// Action registry whose soft order mirrors the lattice preconditions.
    pub fn registry(&self) -> ActionRegistry {
        let mut reg = ActionRegistry::empty();
        for a in &self.actions {
            let pre: Vec<&str> = a.preconditions.iter().map(String::as_str).collect();
            reg.register(ActionInfo::new(a.id.clone(), &a.locus_tag).requires(&pre));
        }
        reg
    }
}

/// Minimal reachable latency over valid application orders of at most
/// `max_steps` actions, with one witness order. Exhaustive over subsets.
pub fn brute_force_best(spec: &LatticeSpec, max_steps: usize) -> Result<(f64, Vec<String>), SimError> {
    spec.check()?;
    let n = spec.actions.len();
    if n > 20 {
        return Err(SimError::InvalidSpec(format!("{n} actions is too many for exhaustive search")));
    }
    let index: BTreeMap<&str, usize> = spec.actions.iter().enumerate().map(|(i, a)| (a.id.as_str(), i)).collect();
    let pre_mask: Vec<u32> = spec
        .actions
        .iter()
        .map(|a| a.preconditions.iter().fold(0u32, |m, p| m | 1 << index[p.as_str()]))
        .collect();
    let latency = |mask: u32| -> f64 {
        spec.actions
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .fold(spec.base_latency, |l, (_, a)| l * a.effect_factor)
    };

    // Breadth-first over valid subsets; every intermediate state must be valid.
    let mut parent: BTreeMap<u32, (u32, usize)> = BTreeMap::new();
    let mut frontier = vec![0u32];
    let mut best = (spec.base_latency, 0u32);
    for _ in 0..max_steps {
        let mut next = Vec::new();
        for &mask in &frontier {
            for (i, &pm) in pre_mask.iter().enumerate() {
                let bit = 1u32 << i;
                if mask & bit != 0 || pm & !mask != 0 {
                    continue;
                }
                let m = mask | bit;
                if m == 0 || parent.contains_key(&m) {
                    continue;
                }
                parent.insert(m, (mask, i));
                next.push(m);
                let l = latency(m);
                if l < best.0 {
                    best = (l, m);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    let mut order = Vec::new();
    let mut cur = best.1;
    while cur != 0 {
        let (prev, i) = parent[&cur];
        order.push(spec.actions[i].id.clone());
        cur = prev;
    }
    order.reverse();
    Ok((best.0, order))
}

const FACTOR_GRID: [f64; 4] = [0.5, 0.6, 0.7, 0.8];
const LOCUS_TAGS: [&str; 5] = ["loop_nest", "global_memory_op", "smem_stage", "intrinsic_site", "launch_config"];

/// Seeded random lattice with actions `a00..`, a precondition chain over
/// the first `chain_depth` actions, and up to two random earlier
/// preconditions for every other action.
pub fn generate_random_lattice(seed: u64, n_actions: usize, chain_depth: usize) -> Result<LatticeSpec, SimError> {
    if !(n_actions >= chain_depth && chain_depth >= 1) {
        return Err(SimError::InvalidSpec(format!(
            "need n_actions >= chain_depth >= 1, got {n_actions} and {chain_depth}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<String> = (0..n_actions).map(|i| format!("a{i:02}")).collect();
    let mut actions = Vec::with_capacity(n_actions);
    for i in 0..n_actions {
        let mut pre = BTreeSet::new();
        if i > 0 && i < chain_depth {
            pre.insert(ids[i - 1].clone());
        } else if i >= chain_depth {
            for _ in 0..rng.random_range(0..=2usize) {
                pre.insert(ids[rng.random_range(0..i)].clone());
            }
        }
        actions.push(LatticeAction {
            id: ids[i].clone(),
            effect_factor: *FACTOR_GRID.choose(&mut rng).expect("non-empty grid"),
            preconditions: pre.into_iter().collect(),
            locus_tag: LOCUS_TAGS.choose(&mut rng).expect("non-empty tags").to_string(),
        });
    }
    let spec = LatticeSpec::new(1000.0, actions);
    spec.check()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_model() {
        let s = LatticeSpec::chain3();
        assert_eq!(s.sim_latency(&["tile"]).unwrap(), SimOutcome::Latency(500.0));
        match s.sim_latency(&["tile", "vectorize", "pipeline"]).unwrap() {
            SimOutcome::Latency(l) => assert!((l - 280.0).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
        assert!(matches!(s.sim_latency(&["vectorize"]).unwrap(), SimOutcome::Incorrect { .. }));
        assert!(s.sim_latency(&["bogus"]).is_err());
    }

    #[test]
    fn product_is_order_independent() {
        let s = LatticeSpec::chain3();
        assert_eq!(
            s.sim_latency(&["pipeline", "tile", "vectorize"]).unwrap(),
            s.sim_latency(&["tile", "vectorize", "pipeline"]).unwrap()
        );
    }

    #[test]
    fn cycle_rejected() {
        let s = LatticeSpec::new(
            1.0,
            vec![LatticeAction::new("x", 0.5, &["y"], "other"), LatticeAction::new("y", 0.5, &["x"], "other")],
        );
        assert!(matches!(s.check(), Err(SimError::Cyclic)));
    }

    #[test]
    fn brute_force_chain() {
        let s = LatticeSpec::chain3();
        let (l, order) = brute_force_best(&s, 3).unwrap();
        assert!((l - 280.0).abs() < 1e-9);
        assert_eq!(order, ["tile", "vectorize", "pipeline"]);
        let (l, order) = brute_force_best(&s, 1).unwrap();
        assert_eq!(l, 500.0);
        assert_eq!(order, ["tile"]);
    }

    #[test]
    fn brute_force_diamond() {
        let s = LatticeSpec::new(
            100.0,
            vec![
                LatticeAction::new("root", 0.5, &[], "other"),
                LatticeAction::new("left", 0.8, &["root"], "other"),
                LatticeAction::new("right", 0.6, &["root"], "other"),
            ],
        );
        let (l, order) = brute_force_best(&s, 3).unwrap();
        assert!((l - 100.0 * 0.5 * 0.8 * 0.6).abs() < 1e-9);
        assert_eq!(order.len(), 3);
        assert_eq!(order[0], "root");
    }

    #[test]
    fn random_lattice_is_reproducible() {
        let a = generate_random_lattice(7, 12, 4).unwrap();
        assert_eq!(a, generate_random_lattice(7, 12, 4).unwrap());
        assert_ne!(a, generate_random_lattice(8, 12, 4).unwrap());
        assert_eq!(a.closure("a03").unwrap(), ["a00", "a01", "a02"]);
        let one = generate_random_lattice(1, 1, 1).unwrap();
        assert_eq!(one.actions.len(), 1);
        assert!(one.actions[0].preconditions.is_empty());
    }
}
