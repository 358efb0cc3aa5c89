//! The skill library: deduplicating in-memory collection, the
//! scope-conditioned retriever and prompt serialization of skill cards.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{Document, ModelError, Precondition, SkillCard, SkillStatus, TrialResult};
use crate::registry::{LanguageFamilies, PlatformOrder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    Merged,
}

/// Skill cards keyed by id. Storing a card whose id already exists merges
/// evidence, risk and verification lists into the existing card.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Library {
    skills: BTreeMap<String, SkillCard>,
}

impl Library {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, card: SkillCard) -> Result<InsertOutcome, ModelError> {
        card.check()?;
        match self.skills.get_mut(&card.id) {
            Some(existing) => {
                existing.merge_from(&card);
                existing.check()?;
                Ok(InsertOutcome::Merged)
            }
            None => {
                self.skills.insert(card.id.clone(), card);
                Ok(InsertOutcome::Inserted)
            }
        }
    }

    /// Replaces a card wholesale (after trials were recorded on a copy).
    pub fn replace(&mut self, card: SkillCard) -> Result<(), ModelError> {
        card.check()?;
        self.skills.insert(card.id.clone(), card);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&SkillCard> {
        self.skills.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SkillCard> {
        self.skills.values()
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn with_status(&self, status: SkillStatus) -> impl Iterator<Item = &SkillCard> {
        self.skills.values().filter(move |s| s.status == status)
    }

    /// Skills eligible for retrieval: admitted with some verified scope.
    pub fn retrievable(&self) -> impl Iterator<Item = &SkillCard> {
        self.with_status(SkillStatus::Admitted).filter(|s| s.scope.has_verified())
    }
}

/// The retrieval query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub case_id: String,
    pub language: String,
    pub platform: String,
    #[serde(default)]
    pub applied_actions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Case,
    Language,
    Platform,
    PriorActions,
}

pub const DIMENSIONS: [Dimension; 4] = [
    Dimension::Case,
    Dimension::Language,
    Dimension::Platform,
    Dimension::PriorActions,
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DimScores {
    pub case: f64,
    pub language: f64,
    pub platform: f64,
    pub prior_actions: f64,
}

impl DimScores {
    pub fn get(&self, dim: Dimension) -> f64 {
        match dim {
            Dimension::Case => self.case,
            Dimension::Language => self.language,
            Dimension::Platform => self.platform,
            Dimension::PriorActions => self.prior_actions,
        }
    }

    /// Final display score. Kept in one place so the weighting can change.
    pub fn total(&self) -> f64 {
        self.case + self.language + self.platform + self.prior_actions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub skill_id: String,
    pub intent: String,
    pub scores: DimScores,
    pub total: f64,
    /// Dimensions whose top-k list contains this skill.
    pub via: Vec<Dimension>,
}

/// Similarity tables used by the retriever.
#[derive(Debug, Clone, Default)]
pub struct Similarity {
    pub languages: LanguageFamilies,
    pub platforms: PlatformOrder,
}

/// Lowercased case-id tags, split on `-`, `_`, `/`, `:`, `.` and whitespace.
pub fn case_tags(case_id: &str) -> BTreeSet<String> {
    case_id
        .split(|c: char| matches!(c, '-' | '_' | '/' | ':' | '.') || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(str::to_ascii_lowercase)
        .collect()
}

/// Jaccard index; two empty sets are identical.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

fn max_or_zero(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, f64::max)
}

impl Similarity {
    /// Per-dimension similarity of `skill`'s verified scope to `target`.
    pub fn scores(&self, skill: &SkillCard, target: &Target) -> DimScores {
        let scope = &skill.scope;
        let target_tags = case_tags(&target.case_id);
        let target_actions: BTreeSet<&str> = target.applied_actions.iter().map(String::as_str).collect();
        DimScores {
            case: max_or_zero(scope.verified_cases().map(|c| jaccard(&target_tags, &case_tags(c)))),
            language: max_or_zero(
                scope
                    .verified_languages()
                    .map(|l| self.languages.similarity(&target.language, l)),
            ),
            platform: if scope
                .verified_platforms()
                .any(|p| self.platforms.satisfies(&target.platform, p))
            {
                1.0
            } else {
                0.0
            },
            prior_actions: max_or_zero(scope.verified_prior_actions().map(|ctx| {
                let ctx: BTreeSet<&str> = ctx.iter().map(String::as_str).collect();
                jaccard(&target_actions, &ctx)
            })),
        }
    }
}

/// Union of the per-dimension top-`k` admitted skills, scored over verified
/// scope only. Each dimension ranks by score, ties by skill id; the union is
/// ordered by total score, ties by skill id.
pub fn retrieve(library: &Library, target: &Target, k: usize, sim: &Similarity) -> Vec<Retrieved> {
    let scored: Vec<(&SkillCard, DimScores)> = library.retrievable().map(|s| (s, sim.scores(s, target))).collect();
    let mut via: BTreeMap<&str, Vec<Dimension>> = BTreeMap::new();
    for dim in DIMENSIONS {
        let mut ranked: Vec<&(&SkillCard, DimScores)> = scored.iter().collect();
        ranked.sort_by(|a, b| b.1.get(dim).total_cmp(&a.1.get(dim)).then_with(|| a.0.id.cmp(&b.0.id)));
        for (skill, _) in ranked.into_iter().take(k) {
            via.entry(skill.id.as_str()).or_default().push(dim);
        }
    }
    let mut out: Vec<Retrieved> = scored
        .iter()
        .filter_map(|(skill, scores)| {
            via.get(skill.id.as_str()).map(|dims| Retrieved {
                skill_id: skill.id.clone(),
                intent: skill.intent.name.clone(),
                scores: *scores,
                total: scores.total(),
                via: dims.clone(),
            })
        })
        .collect();
    out.sort_by(|a, b| b.total.total_cmp(&a.total).then_with(|| a.skill_id.cmp(&b.skill_id)));
    out
}

fn ratio(r: f64) -> String {
    format!("{r:.2}\u{d7}")
}

/// Prompt text for one skill card. Field order is fixed; the carrier body is
/// copied byte for byte; evidence and verification are summarized.
pub fn serialize_skillcard_prompt(skill: &SkillCard) -> String {
    let mut out = format!("skill {}\n", skill.id);
    out.push_str(&format!("intent: {}", skill.intent.name));
    if !skill.intent.description.is_empty() {
        out.push_str(&format!(" - {}", skill.intent.description));
    }
    out.push('\n');
    out.push_str(&format!("anchor: {}", skill.anchor.structural_tag));
    if !skill.anchor.symbol_glob.is_empty() {
        out.push_str(&format!(" at {}", skill.anchor.symbol_glob));
    }
    out.push('\n');
    let kind = serde_json::to_value(skill.carrier.kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    out.push_str(&format!("carrier ({kind}, a hint to instantiate, not executable):\n"));
    out.push_str("<<<carrier\n");
    out.push_str(&skill.carrier.body);
    if !skill.carrier.body.ends_with('\n') {
        out.push('\n');
    }
    out.push_str("carrier>>>\n");

    let pre: Vec<String> = skill
        .pre
        .iter()
        .map(|p| match p {
            Precondition::RequiresAction { action } => format!("requires {action}"),
            Precondition::Condition { text } => text.clone(),
        })
        .collect();
    out.push_str(&format!(
        "precondition: {}\n",
        if pre.is_empty() { "none".to_string() } else { pre.join("; ") }
    ));
    out.push_str(&format!(
        "effect: {} to {}\n",
        ratio(skill.effect.min_ratio),
        ratio(skill.effect.max_ratio)
    ));
    let best = skill.evidence.iter().map(|e| e.latency_ratio).fold(f64::NAN, f64::max);
    out.push_str(&format!(
        "evidence: {} transition{}, best {}\n",
        skill.evidence.len(),
        if skill.evidence.len() == 1 { "" } else { "s" },
        ratio(best)
    ));
    if skill.risk.is_empty() {
        out.push_str("risk: none recorded\n");
    } else {
        out.push_str(&format!("risk: {} record(s)\n", skill.risk.len()));
        for r in skill.risk.iter().take(5) {
            let failure = serde_json::to_value(r.observed_failure)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            out.push_str(&format!(
                "- removing {} at {} failed ({failure}): {}\n",
                r.action_category, r.locus.structural_tag, r.violated_precondition.text
            ));
        }
    }
    let list = |v: Vec<&str>| if v.is_empty() { "-".to_string() } else { v.join(", ") };
    let contexts: Vec<String> = skill
        .scope
        .verified_prior_actions()
        .map(|c| format!("{{{}}}", c.join(", ")))
        .collect();
    out.push_str(&format!(
        "scope: cases {}; languages {}; platforms {}; prior actions {}\n",
        list(skill.scope.verified_cases().collect()),
        list(skill.scope.verified_languages().collect()),
        list(skill.scope.verified_platforms().collect()),
        if contexts.is_empty() { "-".to_string() } else { contexts.join(" ") }
    ));
    let ok = skill.ver.iter().filter(|t| t.result == TrialResult::Success).count();
    out.push_str(&format!("verification: {} trial(s), {ok} successful\n", skill.ver.len()));
    out
}
