//! Persistent domain types and their canonical JSON identity.
//!
//! Every top-level document (`KernelState`, `Lineage`, `SkillCard`) carries a
//! `schema_version` and keeps unknown fields in `extra` so that rewriting a
//! file produced by a newer tool does not drop data.

mod skill;
mod state;
mod transition;

pub use skill::{
    Anchor, Carrier, CarrierKind, EffectRange, EvidenceRef, Intent, Precondition, PriorActionEntry,
    Provenance, RoundtripTrial, Scope, ScopeEntry, SkillCard, SkillStatus, TrialResult,
};
pub use state::{
    KernelState, ProbeOutcome, SeedResult, StateRole, ValidationRecord, ValidationStatus,
};
pub use transition::{
    EffectSignature, FailureKind, ForwardTransition, Lineage, Locus, RiskEvidence,
    ViolatedPrecondition,
};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid effect: latency ratio {0} must be positive and finite")]
    InvalidEffect(f64),
    #[error("invalid lineage: {0}")]
    InvalidLineage(String),
    #[error("invalid skill: {0}")]
    InvalidSkill(String),
    #[error("invalid locus: {0}")]
    InvalidLocus(String),
    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: u32, found: u32 },
    #[error("illegal skill status transition {from:?} -> {to:?}")]
    IllegalStatusTransition { from: SkillStatus, to: SkillStatus },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Content digest of a program variant.
///
/// SHA-256 over a domain tag and the four length-prefixed fields, hex encoded
/// (64 lowercase characters).
pub fn digest_state(source_text: &str, language: &str, platform: &str, case_id: &str) -> Result<String> {
    if source_text.is_empty() {
        return Err(ModelError::InvalidState("source_text is empty".into()));
    }
    Ok(digest_fields(
        "kernel-state/v1",
        &[source_text, language, platform, case_id],
    ))
}

pub(crate) fn digest_fields(tag: &str, fields: &[&str]) -> String {
    let mut hasher = Sha256::new();
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    for f in fields {
        hasher.update((f.len() as u64).to_le_bytes());
        hasher.update(f.as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Half-octave effect bucket: `floor(log2(ratio) * 2)`.
pub fn ratio_bucket(latency_ratio: f64) -> Result<i32> {
    if !(latency_ratio > 0.0) || !latency_ratio.is_finite() {
        return Err(ModelError::InvalidEffect(latency_ratio));
    }
    Ok((latency_ratio.log2() * 2.0).floor() as i32)
}

/// JSON document helpers shared by the persistent types.
pub trait Document: Serialize + DeserializeOwned {
    fn schema_version(&self) -> u32;

    /// Structural invariant check run after every parse.
    fn check(&self) -> Result<()>;

    fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        if doc.schema_version() != SCHEMA_VERSION {
            return Err(ModelError::SchemaMismatch {
                expected: SCHEMA_VERSION,
                found: doc.schema_version(),
            });
        }
        doc.check()?;
        Ok(doc)
    }
}

pub(crate) fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_deterministic_and_case_sensitive() {
        let a = digest_state("a", "sim", "sim", "c1").unwrap();
        let b = digest_state("a", "sim", "sim", "c1").unwrap();
        let c = digest_state("a", "sim", "sim", "c2").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert!(a.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        assert_ne!(a, c);
    }

    #[test]
    fn digest_field_boundaries_matter() {
        let a = digest_state("ab", "c", "sim", "x").unwrap();
        let b = digest_state("a", "bc", "sim", "x").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn digest_rejects_empty_source() {
        assert!(matches!(
            digest_state("", "sim", "sim", "c1"),
            Err(ModelError::InvalidState(_))
        ));
    }

    #[test]
    fn ratio_buckets() {
        assert_eq!(ratio_bucket(1.0).unwrap(), 0);
        // log2(194) = 7.600 -> 15.2
        assert_eq!(ratio_bucket(194.0).unwrap(), 15);
        assert_eq!(ratio_bucket(0.5).unwrap(), -2);
        assert_eq!(ratio_bucket(2.0).unwrap(), 2);
        assert_eq!(ratio_bucket(2.4).unwrap(), 2);
        assert!(ratio_bucket(0.0).is_err());
        assert!(ratio_bucket(-1.0).is_err());
        assert!(ratio_bucket(f64::NAN).is_err());
    }
}
