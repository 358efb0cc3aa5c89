//! The rewriter interface: an LLM (or a deterministic stand-in) that edits
//! program text for backward simplification, forward re-derivation and
//! skill materialization.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::model::Locus;

#[derive(Debug, Error)]
pub enum RewriteError {
    #[error("rewriter transport failure: {0}")]
    Transport(String),
    #[error("no code block in rewriter response")]
    MaterializationParse,
    #[error("rewriter protocol error: {0}")]
    Protocol(String),
    #[error("rewriter could not produce an edit: {0}")]
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteMode {
    /// Remove or weaken one optimization (backward step).
    Remove,
    /// Re-derive a forward edit that restores one optimization.
    Add,
    /// Instantiate a retrieved skill on the target surface.
    Materialize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub mode: RewriteMode,
    pub source: String,
    pub language: String,
    pub platform: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locus: Option<Locus>,
    /// Serialized skill card for materialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skill_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub carrier: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_hint: Option<String>,
    /// Stable session prefix (lineages and skill cards), sent once and cached.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub prefix: String,
}

impl RewriteRequest {
    pub fn new(mode: RewriteMode, source: &str, language: &str, platform: &str) -> Self {
        Self {
            mode,
            source: source.to_string(),
            language: language.to_string(),
            platform: platform.to_string(),
            action_category: None,
            locus: None,
            skill_prompt: None,
            carrier: None,
            retry_hint: None,
            prefix: String::new(),
        }
    }

    pub fn action(mut self, action: &str, locus: Option<Locus>) -> Self {
        self.action_category = Some(action.to_string());
        self.locus = locus;
        self
    }

    /// The per-step part of the prompt.
    pub fn render_suffix(&self) -> String {
        let mut out = String::new();
        let action = self.action_category.as_deref().unwrap_or("(see skill)");
        match self.mode {
            RewriteMode::Remove => out.push_str(&format!(
                "Simplify the {} kernel below by removing or weakening exactly one optimization: {action}.\n",
                self.language
            )),
            RewriteMode::Add => out.push_str(&format!(
                "Apply exactly one optimization to the {} kernel below: {action}. The result must stay functionally equivalent.\n",
                self.language
            )),
            RewriteMode::Materialize => out.push_str(&format!(
                "Materialize the skill below on the {} kernel for platform {}. Use the carrier as a hint, not as executable code.\n",
                self.language, self.platform
            )),
        }
        if let Some(locus) = &self.locus {
            out.push_str(&format!(
                "Locus: {} {} lines {}-{} ({})\n",
                locus.file, locus.symbol_path, locus.line_span.0, locus.line_span.1, locus.structural_tag
            ));
        }
        if let Some(skill) = &self.skill_prompt {
            out.push('\n');
            out.push_str(skill);
            out.push('\n');
        }
        if let Some(hint) = &self.retry_hint {
            out.push_str(&format!("\nPrevious attempt failed. Known risks:\n{hint}\n"));
        }
        out.push_str(&format!("\n```{}\n{}\n```\n", self.language, self.source.trim_end()));
        out.push_str("Reply with the complete edited program in one fenced code block.\n");
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub cached_input_tokens: u64,
    pub output_tokens: u64,
    /// Whether the counts already cover the session prefix. Synthetic
    /// rewriters report suffix-only counts.
    #[serde(default)]
    pub includes_prefix: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteResponse {
    pub source: String,
    pub usage: TokenUsage,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub trait Rewriter: Send + Sync {
    fn rewrite(&self, request: &RewriteRequest) -> Result<RewriteResponse, RewriteError>;
}

impl<R: Rewriter + ?Sized> Rewriter for std::sync::Arc<R> {
    fn rewrite(&self, request: &RewriteRequest) -> Result<RewriteResponse, RewriteError> {
        (**self).rewrite(request)
    }
}

/// Rough token count for prompt text (four characters per token).
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

/// Extracts the program from a chat response: the last fenced code block.
/// Returns the block and the number of complete blocks found.
pub fn extract_code_block(text: &str) -> Result<(String, usize), RewriteError> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        if trimmed.starts_with("```") {
            match current.take() {
                Some(body) => blocks.push(body.join("\n")),
                None => current = Some(Vec::new()),
            }
            continue;
        }
        if let Some(body) = current.as_mut() {
            body.push(line);
        }
    }
    let count = blocks.len();
    match blocks.pop() {
        Some(last) if !last.trim().is_empty() => Ok((last, count)),
        _ => Err(RewriteError::MaterializationParse),
    }
}

/// OpenAI-compatible chat-completions client.
#[derive(Debug, Clone)]
pub struct HttpRewriter {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retries: u32,
    pub backoff: Duration,
}

impl HttpRewriter {
    pub fn new(url: &str, model: &str, api_key_env: Option<&str>) -> Self {
        Self {
            url: url.to_string(),
            model: model.to_string(),
            api_key: api_key_env.and_then(|k| std::env::var(k).ok()),
            timeout: Duration::from_secs(300),
            retries: 2,
            backoff: Duration::from_millis(500),
        }
    }

    fn post(&self, body: &Value) -> Result<Value, RewriteError> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let mut req = agent.post(&self.url).set("content-type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body.clone()) {
            Ok(resp) => resp
                .into_json::<Value>()
                .map_err(|e| RewriteError::Protocol(format!("response body: {e}"))),
            Err(ureq::Error::Status(code, resp)) if code >= 500 || code == 429 => {
                let text = resp.into_string().unwrap_or_default();
                Err(RewriteError::Transport(format!("status {code}: {text}")))
            }
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                Err(RewriteError::Protocol(format!("status {code}: {text}")))
            }
            Err(e) => Err(RewriteError::Transport(e.to_string())),
        }
    }
}

/// Parses a chat-completions response body into program text and usage.
pub fn parse_chat_response(body: &Value) -> Result<RewriteResponse, RewriteError> {
    let content = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| RewriteError::Protocol("missing choices[0].message.content".into()))?;
    let (source, blocks) = extract_code_block(content)?;
    let mut warnings = Vec::new();
    if blocks > 1 {
        warnings.push(format!("{blocks} code blocks in response; took the last"));
    }
    let num = |p: &str| body.pointer(p).and_then(Value::as_u64).unwrap_or(0);
    let prompt = num("/usage/prompt_tokens");
    let cached = num("/usage/prompt_tokens_details/cached_tokens").min(prompt);
    Ok(RewriteResponse {
        source,
        usage: TokenUsage {
            input_tokens: prompt - cached,
            cached_input_tokens: cached,
            output_tokens: num("/usage/completion_tokens"),
            includes_prefix: true,
        },
        warnings,
    })
}

impl Rewriter for HttpRewriter {
    fn rewrite(&self, request: &RewriteRequest) -> Result<RewriteResponse, RewriteError> {
        let mut messages = Vec::new();
        if !request.prefix.is_empty() {
            messages.push(json!({"role": "system", "content": request.prefix}));
        }
        messages.push(json!({"role": "user", "content": request.render_suffix()}));
        let body = json!({"model": self.model, "messages": messages, "temperature": 0});
        let mut attempt = 0;
        loop {
            match self.post(&body) {
                Ok(v) => {
                    let resp = parse_chat_response(&v)?;
                    for w in &resp.warnings {
                        log::warn!("{w}");
                    }
                    return Ok(resp);
                }
                Err(RewriteError::Transport(e)) if attempt < self.retries => {
                    attempt += 1;
                    log::warn!("rewriter transport failure (attempt {attempt}): {e}");
                    thread::sleep(self.backoff * attempt);
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Replays recorded edits keyed by (mode, action, input source). Anything
/// not recorded fails.
#[derive(Debug, Clone, Default)]
pub struct ScriptedRewriter {
    edits: std::collections::BTreeMap<(RewriteMode, String, String), String>,
    pub usage: TokenUsage,
}

impl ScriptedRewriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn edit(mut self, mode: RewriteMode, action: &str, from: &str, to: &str) -> Self {
        self.edits
            .insert((mode, action.to_string(), from.to_string()), to.to_string());
        self
    }
}

impl Rewriter for ScriptedRewriter {
    fn rewrite(&self, request: &RewriteRequest) -> Result<RewriteResponse, RewriteError> {
        let action = request.action_category.clone().unwrap_or_default();
        let key = (request.mode, action, request.source.clone());
        match self.edits.get(&key) {
            Some(to) => Ok(RewriteResponse {
                source: to.clone(),
                usage: self.usage,
                warnings: Vec::new(),
            }),
            None => Err(RewriteError::Failed(format!("no recorded {:?} edit for {}", key.0, key.1))),
        }
    }
}

/// A rewriter behind a subprocess speaking JSON on stdin/stdout.
#[derive(Debug, Clone)]
pub struct ProcessRewriter {
    pub argv: Vec<String>,
    pub timeout: Duration,
}

impl Rewriter for ProcessRewriter {
    fn rewrite(&self, request: &RewriteRequest) -> Result<RewriteResponse, RewriteError> {
        let input = serde_json::to_vec(request).map_err(|e| RewriteError::Protocol(e.to_string()))?;
        let out = crate::process::exchange(&self.argv, &input, self.timeout)
            .map_err(|e| RewriteError::Transport(e.to_string()))?;
        parse_rewrite_response(&out.stdout)
    }
}

/// Parses a subprocess rewriter reply: a response object or `{"error": ..}`.
pub fn parse_rewrite_response(bytes: &[u8]) -> Result<RewriteResponse, RewriteError> {
    let v: Value = serde_json::from_slice(bytes).map_err(|e| RewriteError::Protocol(e.to_string()))?;
    if let Some(err) = v.get("error") {
        let msg = err.as_str().map(str::to_string).unwrap_or_else(|| err.to_string());
        return Err(RewriteError::Failed(msg));
    }
    serde_json::from_value(v).map_err(|e| RewriteError::Protocol(e.to_string()))
}
