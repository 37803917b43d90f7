//! Completion backends: the live gateway (see [`crate::gateway`]), scripted
//! playback and a recording wrapper.
//!
//! # Playback table layout
//!
//! A playback table is a directory with one file per request:
//!
//! * `<fingerprint>.txt` holds the completion text verbatim;
//! * `<fingerprint>.usage` (optional) holds `<input_tokens> <output_tokens>`.
//!
//! The fingerprint is the lowercase hex SHA-256 of the operator name, a
//! newline, and the rendered messages (see [`fingerprint`]).

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::OperatorKind;
use crate::model::{NodeId, TokenUsage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { temperature: 0.7, max_tokens: None, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub operator: OperatorKind,
    pub model: String,
    pub messages: Vec<Message>,
    pub sampling: SamplingParams,
    /// Node the call is made for. Not sent over the wire.
    pub node: Option<NodeId>,
    /// Debug attempt within the node. Not sent over the wire.
    pub attempt: u32,
}

impl CompletionRequest {
    pub fn fingerprint(&self) -> String {
        fingerprint(self.operator, &self.messages)
    }

    /// Concatenated content of all user messages.
    pub fn user_text(&self) -> String {
        self.messages.iter().filter(|m| m.role == Role::User).map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

/// Stable request fingerprint over the operator kind and rendered prompt.
pub fn fingerprint(operator: OperatorKind, messages: &[Message]) -> String {
    let mut h = Sha256::new();
    h.update(operator.as_str().as_bytes());
    h.update(b"\n");
    for m in messages {
        let role = match m.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        h.update(role.as_bytes());
        h.update(b"\x1f");
        h.update(m.content.as_bytes());
        h.update(b"\x1e");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: TokenUsage,
    /// Non-fatal anomalies, such as a response without a usage object.
    pub warnings: Vec<String>,
}

impl Completion {
    pub fn new(text: impl Into<String>, usage: TokenUsage) -> Self {
        Self { text: text.into(), usage, warnings: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("token budget exhausted")]
    BudgetExhausted,
    #[error("gave up after {attempts} attempts: {last}")]
    TransientExhausted { attempts: u32, last: String },
    #[error("authentication rejected (status {0})")]
    AuthFailure(u16),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no scripted response for fingerprint {0}")]
    UnknownFingerprint(String),
    #[error("backend io: {0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl BackendError {
    /// Errors that must end the run rather than just fail one node.
    pub fn is_fatal(&self) -> bool {
        matches!(self, BackendError::BudgetExhausted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    LiveGateway,
    ScriptedPlayback,
    Recording,
}

/// A text-completion provider.
pub trait CompletionBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError>;

    /// Informs the backend of usage spent before this process started (on
    /// resume), so budgets carry over.
    fn seed_usage(&self, _prior: TokenUsage) {}
}

type Responder = dyn Fn(&CompletionRequest) -> Result<Completion, BackendError> + Send + Sync;

/// Scripted playback driven by a function of the request.
pub struct ScriptedBackend {
    responder: Box<Responder>,
    calls: AtomicU64,
}

impl fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedBackend").field("calls", &self.calls.load(Ordering::Relaxed)).finish()
    }
}

impl ScriptedBackend {
    pub fn new(f: impl Fn(&CompletionRequest) -> Result<Completion, BackendError> + Send + Sync + 'static) -> Self {
        Self { responder: Box::new(f), calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl CompletionBackend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::ScriptedPlayback
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        (self.responder)(request)
    }
}

/// Playback from a fingerprint table. Unknown fingerprints are errors.
#[derive(Debug, Clone, Default)]
pub struct PlaybackBackend {
    table: HashMap<String, Completion>,
}

impl PlaybackBackend {
    pub fn from_map(table: HashMap<String, Completion>) -> Self {
        Self { table }
    }

    pub fn load(dir: &Path) -> Result<Self, BackendError> {
        let io = |e: std::io::Error| BackendError::Io(format!("{}: {e}", dir.display()));
        let mut table = HashMap::new();
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(fp) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let text = std::fs::read_to_string(&path).map_err(io)?;
            let usage_path = path.with_extension("usage");
            let usage = if usage_path.exists() {
                parse_usage(&std::fs::read_to_string(&usage_path).map_err(io)?).ok_or_else(|| {
                    BackendError::MalformedResponse(format!("bad usage file {}", usage_path.display()))
                })?
            } else {
                TokenUsage::ZERO
            };
            table.insert(fp.to_string(), Completion::new(text, usage));
        }
        Ok(Self { table })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

fn parse_usage(s: &str) -> Option<TokenUsage> {
    let mut it = s.split_whitespace();
    let input = it.next()?.parse().ok()?;
    let output = it.next()?.parse().ok()?;
    Some(TokenUsage::new(input, output))
}

impl CompletionBackend for PlaybackBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::ScriptedPlayback
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let fp = request.fingerprint();
        self.table.get(&fp).cloned().ok_or(BackendError::UnknownFingerprint(fp))
    }
}

/// One recorded exchange, stored as `<run_dir>/recordings/<seq>-<fingerprint>.json`.
/// The request body is recorded as sent, without any authorization header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub fingerprint: String,
    pub operator: OperatorKind,
    pub request: serde_json::Value,
    pub response_text: String,
    pub usage: TokenUsage,
}

/// Wraps a backend and records every successful exchange.
pub struct RecordingBackend {
    inner: Arc<dyn CompletionBackend>,
    dir: PathBuf,
    seq: AtomicU64,
}

impl fmt::Debug for RecordingBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RecordingBackend").field("dir", &self.dir).finish()
    }
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn CompletionBackend>, dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| BackendError::Io(format!("{}: {e}", dir.display())))?;
        let existing = std::fs::read_dir(&dir).map(|d| d.count() as u64).unwrap_or(0);
        Ok(Self { inner, dir, seq: AtomicU64::new(existing) })
    }
}

pub fn request_body(request: &CompletionRequest) -> serde_json::Value {
    let mut body = serde_json::json!({
        "model": request.model,
        "messages": request.messages,
        "temperature": request.sampling.temperature,
    });
    if let Some(m) = request.sampling.max_tokens {
        body["max_tokens"] = m.into();
    }
    if let Some(s) = request.sampling.seed {
        body["seed"] = s.into();
    }
    body
}

impl CompletionBackend for RecordingBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Recording
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let completion = self.inner.complete(request)?;
        let rec = Recording {
            fingerprint: request.fingerprint(),
            operator: request.operator,
            request: request_body(request),
            response_text: completion.text.clone(),
            usage: completion.usage,
        };
        let n = self.seq.fetch_add(1, Ordering::Relaxed);
        let path = self.dir.join(format!("{n:06}-{}.json", &rec.fingerprint[..16]));
        let json = serde_json::to_string_pretty(&rec).expect("recording serializes");
        std::fs::write(&path, json).map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?;
        Ok(completion)
    }

    fn seed_usage(&self, prior: TokenUsage) {
        self.inner.seed_usage(prior)
    }
}

/// Converts a recordings directory into a playback table. Returns the
/// number of entries written. Conflicting responses for one fingerprint are
/// an error.
pub fn build_playback_table(recordings: &Path, table: &Path) -> Result<usize, BackendError> {
    let io = |p: &Path, e: std::io::Error| BackendError::Io(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(table).map_err(|e| io(table, e))?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(recordings)
        .map_err(|e| io(recordings, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
        .collect();
    files.sort();
    let mut seen: HashMap<String, String> = HashMap::new();
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| io(f, e))?;
        let rec: Recording = serde_json::from_str(&text)
            .map_err(|e| BackendError::MalformedResponse(format!("{}: {e}", f.display())))?;
        if let Some(prev) = seen.get(&rec.fingerprint) {
            if *prev != rec.response_text {
                return Err(BackendError::Other(format!("conflicting recordings for fingerprint {}", rec.fingerprint)));
            }
            continue;
        }
        let txt = table.join(format!("{}.txt", rec.fingerprint));
        std::fs::write(&txt, &rec.response_text).map_err(|e| io(&txt, e))?;
        let usage = table.join(format!("{}.usage", rec.fingerprint));
        std::fs::write(&usage, format!("{} {}\n", rec.usage.input_tokens, rec.usage.output_tokens))
            .map_err(|e| io(&usage, e))?;
        seen.insert(rec.fingerprint, rec.response_text);
    }
    Ok(seen.len())
}
