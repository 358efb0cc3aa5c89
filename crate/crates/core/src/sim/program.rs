use std::collections::BTreeSet;

use super::SimError;

pub const HEADER: &str = "sim-kernel v1";
const WRAPPER_LINE: &str = "fallback reference";

/// The canonical text encoding of a sim program: a header, one
/// `apply <action>` line per applied action in sorted order, and an optional
/// `fallback reference` line marking a wrapper that copies the reference
/// output.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimProgram {
    pub actions: BTreeSet<String>,
    pub wrapper: bool,
}

pub(crate) fn valid_action_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl SimProgram {
    pub fn new<S: AsRef<str>>(actions: &[S]) -> Self {
        Self {
            actions: actions.iter().map(|a| a.as_ref().to_string()).collect(),
            wrapper: false,
        }
    }

    pub fn wrapper(mut self) -> Self {
        self.wrapper = true;
        self
    }

    pub fn render(&self) -> String {
        let mut out = format!("{HEADER}\n");
        for a in &self.actions {
            out.push_str("apply ");
            out.push_str(a);
            out.push('\n');
        }
        if self.wrapper {
            out.push_str(WRAPPER_LINE);
            out.push('\n');
        }
        out
    }

    /// Parses program text. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .enumerate()
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, HEADER)) => {}
            Some((n, other)) => return Err(SimError::Parse(format!("line {}: expected header, got {other:?}", n + 1))),
            None => return Err(SimError::Parse("empty program".into())),
        }
        let mut prog = Self::default();
        for (n, line) in lines {
            if line == WRAPPER_LINE {
                prog.wrapper = true;
                continue;
            }
            let id = line
                .strip_prefix("apply ")
                .map(str::trim)
                .ok_or_else(|| SimError::Parse(format!("line {}: unknown directive {line:?}", n + 1)))?;
            if !valid_action_id(id) {
                return Err(SimError::Parse(format!("line {}: invalid action id {id:?}", n + 1)));
            }
            if !prog.actions.insert(id.to_string()) {
                return Err(SimError::Parse(format!("line {}: duplicate action {id}", n + 1)));
            }
        }
        Ok(prog)
    }
}
