//! Unified diffs for forward transitions.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("malformed diff: {0}")]
    Parse(String),
    #[error("diff does not apply: {0}")]
    Apply(String),
}

/// Unified diff turning `from` into `to`.
pub fn make_diff(from: &str, to: &str) -> String {
    diffy::create_patch(from, to).to_string()
}

/// Parses a unified diff and re-renders it, which validates its structure.
pub fn parse_diff(text: &str) -> Result<String, DiffError> {
    let patch = diffy::Patch::from_str(text).map_err(|e| DiffError::Parse(e.to_string()))?;
    Ok(patch.to_string())
}

pub fn apply_diff(base: &str, diff: &str) -> Result<String, DiffError> {
    let patch = diffy::Patch::from_str(diff).map_err(|e| DiffError::Parse(e.to_string()))?;
    diffy::apply(base, &patch).map_err(|e| DiffError::Apply(e.to_string()))
}
