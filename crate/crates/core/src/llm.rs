//! Language-model mutation: prompt construction, chat-completion backends
//! and extraction of candidate programs from completions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{parse, parse_body, print, validate, Program, Signature, DEFAULT_MAX_STATEMENTS, GRAMMAR_SUMMARY};

/// Words that would reveal the target algorithm. Anti-leak prompts must not
/// contain any of them (case-insensitive substring match).
pub const BLOCKLIST: &[&str] = &[
    "kalman",
    "filter",
    "covariance",
    "gain",
    "innovation",
    "riccati",
    "estimat",
    "predict",
    "measurement",
    "observation",
    "x_update",
    "s_inv",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// Generic names only, no description of the problem.
    AntiLeak,
    /// Reference names plus a free-text description of the problem.
    Descriptive,
}

#[derive(Debug, Clone)]
pub struct PromptSpec {
    pub mode: PromptMode,
    pub parents: [Program; 2],
    pub signature: Signature,
    pub max_tokens: usize,
    pub problem_description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("anti-leak prompt contains blocked word `{0}`")]
    Blocked(String),
    #[error("parent {0} cannot be written against the required signature")]
    Parent(usize),
    #[error("anti-leak mode requires a generic signature")]
    NotGeneric,
}

/// First blocklisted word found in `text`, if any.
pub fn find_blocked(text: &str) -> Option<&'static str> {
    let lower = text.to_lowercase();
    BLOCKLIST.iter().copied().find(|w| lower.contains(w))
}

pub fn build_prompt(spec: &PromptSpec) -> Result<String, PromptError> {
    let anti_leak = spec.mode == PromptMode::AntiLeak;
    if anti_leak && spec.signature != spec.signature.to_generic() {
        return Err(PromptError::NotGeneric);
    }
    let mut parents = Vec::with_capacity(2);
    for (i, p) in spec.parents.iter().enumerate() {
        let p = if !anti_leak && p.signature == spec.signature {
            p.clone()
        } else {
            p.rebind(&spec.signature, "f", anti_leak).ok_or(PromptError::Parent(i))?
        };
        parents.push(p);
    }

    let sig_line = format!("fn f({}) -> ({})", spec.signature.inputs.join(", "), spec.signature.outputs.join(", "));
    let mut out = String::new();
    out.push_str("You are improving a function written in a small matrix language.\n\n");
    if let (PromptMode::Descriptive, Some(desc)) = (spec.mode, &spec.problem_description) {
        out.push_str("Problem description:\n");
        out.push_str(desc);
        out.push_str("\n\n");
    }
    let _ = writeln!(out, "Required signature (same inputs and outputs, in this exact order):\n{sig_line}\n");
    out.push_str("Language:\n");
    out.push_str(GRAMMAR_SUMMARY);
    out.push_str("\n\nTwo current versions, the first scoring better:\n\n");
    for (label, p) in ["Version A", "Version B"].iter().zip(&parents) {
        let _ = write!(out, "{label}:\n```\n{}```\n\n", print(p));
    }
    let _ = writeln!(
        out,
        "Write several improved versions. Put each one in its own fenced code block and use \
         exactly the signature above. Use at most {DEFAULT_MAX_STATEMENTS} statements per version \
         and keep the whole reply under {} tokens.",
        spec.max_tokens
    );
    if anti_leak {
        if let Some(w) = find_blocked(&out) {
            return Err(PromptError::Blocked(w.to_string()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("HTTP status {0}")]
    Status(u16),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("mock script: {0}")]
    Script(String),
}

impl BackendError {
    fn is_transient(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::Transport(_) => true,
            BackendError::Status(code) => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

/// Source of completions.
pub trait Backend: Send + Sync {
    /// `seq` identifies the prompt within the run; the mock uses it to pick
    /// a reply so results do not depend on dispatch order.
    fn complete(&self, prompt: &str, seq: u64) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendConfig {
    /// Canned completions separated by lines containing only `%%`.
    Mock { script: PathBuf },
    /// OpenAI-style chat-completion endpoint.
    Http {
        endpoint: String,
        #[serde(default = "default_token_env")]
        token_env: String,
        #[serde(default = "default_model")]
        model: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default = "default_retries")]
        retries: u32,
    },
}

fn default_token_env() -> String {
    "EVOFILTER_API_TOKEN".into()
}
fn default_model() -> String {
    "default".into()
}
fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    3
}

impl BackendConfig {
    /// Parses `mock:<path>` or `http:<url>`.
    pub fn from_spec(spec: &str) -> Result<Self, String> {
        if let Some(path) = spec.strip_prefix("mock:") {
            Ok(BackendConfig::Mock { script: PathBuf::from(path) })
        } else if let Some(url) = spec.strip_prefix("http:") {
            let endpoint = if url.starts_with("//") { format!("http:{url}") } else { url.to_string() };
            Ok(BackendConfig::Http {
                endpoint,
                token_env: default_token_env(),
                model: default_model(),
                timeout_secs: default_timeout(),
                retries: default_retries(),
            })
        } else {
            Err(format!("backend `{spec}` must be mock:<path> or http:<url>"))
        }
    }

    pub fn connect(&self, max_tokens: usize) -> Result<Box<dyn Backend>, BackendError> {
        match self {
            BackendConfig::Mock { script } => Ok(Box::new(MockBackend::from_file(script)?)),
            BackendConfig::Http { endpoint, token_env, model, timeout_secs, retries } => Ok(Box::new(HttpBackend {
                endpoint: endpoint.clone(),
                token: std::env::var(token_env).ok(),
                model: model.clone(),
                timeout: Duration::from_secs(*timeout_secs),
                retries: *retries,
                max_tokens,
                backoff: Duration::from_millis(500),
            })),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    completions: Vec<String>,
}

impl MockBackend {
    pub fn new(completions: Vec<String>) -> Self {
        MockBackend { completions }
    }

    pub fn from_script(text: &str) -> Self {
        let mut completions = vec![String::new()];
        for line in text.split_inclusive('\n') {
            if line.trim_end_matches(['\n', '\r']) == "%%" {
                completions.push(String::new());
            } else {
                completions.last_mut().expect("non-empty").push_str(line);
            }
        }
        if completions.len() > 1 && completions.last().is_some_and(|c| c.trim().is_empty()) {
            completions.pop();
        }
        MockBackend { completions }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        Ok(Self::from_script(&text))
    }

    pub fn len(&self) -> usize {
        self.completions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completions.is_empty()
    }
}

impl Backend for MockBackend {
    fn complete(&self, _prompt: &str, seq: u64) -> Result<String, BackendError> {
        if self.completions.is_empty() {
            return Err(BackendError::Script("no completions".into()));
        }
        Ok(self.completions[(seq % self.completions.len() as u64) as usize].clone())
    }
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    pub endpoint: String,
    pub token: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub retries: u32,
    pub max_tokens: usize,
    /// Delay before the first retry; doubled on every further attempt.
    pub backoff: Duration,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    max_tokens: usize,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: Option<String>,
}

impl HttpBackend {
    fn attempt(&self, agent: &ureq::Agent, body: &str) -> Result<String, BackendError> {
        let mut req = agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send(body).map_err(|e| match e {
            ureq::Error::StatusCode(code) => BackendError::Status(code),
            ureq::Error::Timeout(_) => BackendError::Timeout,
            other => BackendError::Transport(other.to_string()),
        })?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Malformed("no choices".into()))
    }
}

impl Backend for HttpBackend {
    fn complete(&self, prompt: &str, _seq: u64) -> Result<String, BackendError> {
        let body = serde_json::to_string(&ChatRequest {
            model: &self.model,
            messages: [ChatMessage { role: "user", content: prompt }],
            max_tokens: self.max_tokens,
        })
        .map_err(|e| BackendError::Malformed(e.to_string()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(true)
            .build()
            .into();
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(&agent, &body) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_transient() && attempt < self.retries => {
                    log::warn!("completion request failed ({e}), retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    /// Index of the fenced block within the completion.
    pub block: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedCompletion {
    pub programs: Vec<Program>,
    pub rejections: Vec<Rejection>,
}

/// Contents of every fenced code block. An unterminated final block is
/// included.
pub fn fenced_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<String> = None;
    for line in text.lines() {
        let fence = line.trim_start().starts_with("```");
        match (&mut current, fence) {
            (None, true) => current = Some(String::new()),
            (Some(_), true) => blocks.push(current.take().expect("open block")),
            (Some(buf), false) => {
                buf.push_str(line);
                buf.push('\n');
            }
            (None, false) => {}
        }
    }
    if let Some(buf) = current {
        if !buf.trim().is_empty() {
            blocks.push(buf);
        }
    }
    blocks
}

/// Parses and validates every fenced block against `sig`. Blocks may hold
/// a full `fn` definition or just the body.
pub fn parse_completions(text: &str, sig: &Signature) -> ParsedCompletion {
    let mut out = ParsedCompletion::default();
    for (block, src) in fenced_blocks(text).into_iter().enumerate() {
        let parsed = if src.trim_start().starts_with("fn") {
            parse(&src)
        } else {
            parse_body(&src, sig, "f")
        };
        let program = match parsed {
            Ok(p) => p,
            Err(e) => {
                out.rejections.push(Rejection { block, reason: format!("{}: {e}", e.kind()) });
                continue;
            }
        };
        match validate(&program, sig, DEFAULT_MAX_STATEMENTS) {
            Ok(()) => out.programs.push(program),
            Err(vs) => out.rejections.push(Rejection {
                block,
                reason: vs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
            }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::{TaskSpec, TaskTag};

    fn parents() -> [Program; 2] {
        let t = TaskSpec::new(TaskTag::Full, false);
        let k = t.reference_candidate();
        let p = parse(include_str!("../fixtures/half_gaussian_llm.mdsl")).unwrap();
        [k, p]
    }

    #[test]
    fn anti_leak_prompt_hides_names() {
        let spec = PromptSpec {
            mode: PromptMode::AntiLeak,
            parents: parents(),
            signature: Signature::generic(6, 6),
            max_tokens: 3000,
            problem_description: None,
        };
        let text = build_prompt(&spec).unwrap();
        assert!(text.contains("i_1"));
        assert_eq!(text.matches("```").count(), 4);
        assert!(find_blocked(&text).is_none(), "{text}");
        assert_eq!(build_prompt(&spec).unwrap(), text);
    }

    #[test]
    fn grammar_summary_is_clean() {
        assert_eq!(find_blocked(GRAMMAR_SUMMARY), None);
    }

    #[test]
    fn descriptive_prompt_carries_description() {
        let t = TaskSpec::new(TaskTag::Full, false);
        let desc = "Track a moving object whose sensor noise is always positive.";
        let spec = PromptSpec {
            mode: PromptMode::Descriptive,
            parents: parents(),
            signature: t.signature.clone(),
            max_tokens: 3000,
            problem_description: Some(desc.into()),
        };
        let text = build_prompt(&spec).unwrap();
        assert!(text.contains(desc));
        assert!(text.contains("x_update = x_predict + K @ y;"));
    }

    #[test]
    fn mock_script_rotates() {
        let m = MockBackend::from_script("first\nreply\n%%\nsecond\n");
        assert_eq!(m.len(), 2);
        assert_eq!(m.complete("", 0).unwrap(), "first\nreply\n");
        assert_eq!(m.complete("", 3).unwrap(), "second\n");
        let one = MockBackend::from_script("only one\n");
        assert_eq!(one.complete("", 7).unwrap(), "only one\n");
    }

    #[test]
    fn completions_are_filtered() {
        let sig = Signature::generic(1, 1);
        let text = "Here you go.\n```\nfn f(i_1) -> (o_1) { o_1 = i_1 @ i_1 }\n```\nand\n```dsl\no_1 = inv(i_1)\n```\n\
                    broken:\n```\nfn f(i_1) -> (o_1) { o_1 = nope }\n```\n";
        let r = parse_completions(text, &sig);
        assert_eq!(r.programs.len(), 2);
        assert_eq!(r.rejections.len(), 1);
        assert!(r.rejections[0].reason.starts_with("use-before-assign"), "{:?}", r.rejections);
        assert!(parse_completions("no code at all", &sig).programs.is_empty());
    }

    #[test]
    fn unreachable_endpoint_fails_after_retries() {
        let b = HttpBackend {
            endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
            token: None,
            model: "m".into(),
            timeout: Duration::from_secs(2),
            retries: 2,
            max_tokens: 10,
            backoff: Duration::from_millis(1),
        };
        assert!(b.complete("hi", 0).is_err());
    }

    #[test]
    fn backend_specs() {
        assert_eq!(
            BackendConfig::from_spec("mock:a.txt").unwrap(),
            BackendConfig::Mock { script: "a.txt".into() }
        );
        assert!(matches!(BackendConfig::from_spec("http://h/v1").unwrap(), BackendConfig::Http { endpoint, .. } if endpoint == "http://h/v1"));
        assert!(BackendConfig::from_spec("ftp:x").is_err());
    }
}
