//! Chat-completion HTTP client (the live backend) and run-level token
//! accounting.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::journal::{EventBody, JournalEvent};
use crate::model::{NodeId, TokenUsage};
use crate::operators::backend::request_body;
use crate::operators::{
    BackendError, BackendKind, Completion, CompletionBackend, CompletionRequest, ModelRouting, OperatorKind,
};

pub const API_KEY_ENV: &str = "SEPDD_API_KEY";

/// A string that never shows up in `Debug`, `Display`, or serialized output.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct SecretString(String);

impl SecretString {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(API_KEY_ENV).ok().filter(|v| !v.is_empty()).map(Self)
    }

    pub fn expose(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Replaces every occurrence of the secret in `text`.
    pub fn redact(&self, text: &str) -> String {
        if self.0.is_empty() {
            text.to_string()
        } else {
            text.replace(&self.0, "[redacted]")
        }
    }
}

impl fmt::Debug for SecretString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretString(***)")
    }
}

/// Optional caps on cumulative usage. A cap is reached when usage is at or
/// above it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenBudget {
    #[serde(default)]
    pub max_input: Option<u64>,
    #[serde(default)]
    pub max_output: Option<u64>,
    #[serde(default)]
    pub max_total: Option<u64>,
}

impl TokenBudget {
    pub fn check(&self) -> Result<(), String> {
        for (name, v) in [("max_input", self.max_input), ("max_output", self.max_output), ("max_total", self.max_total)]
        {
            if v == Some(0) {
                return Err(format!("token_budget.{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn exhausted(&self, used: TokenUsage) -> bool {
        self.max_input.is_some_and(|m| used.input_tokens >= m)
            || self.max_output.is_some_and(|m| used.output_tokens >= m)
            || self.max_total.is_some_and(|m| used.total() >= m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub base_url: String,
    /// Read from `SEPDD_API_KEY`, never from a config file.
    #[serde(skip)]
    pub api_key: SecretString,
    #[serde(default)]
    pub model_map: ModelRouting,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default)]
    pub token_budget: Option<TokenBudget>,
}

fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    4
}
fn default_backoff() -> u64 {
    500
}

impl GatewayConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: SecretString::default(),
            model_map: ModelRouting::default(),
            request_timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_base_ms: default_backoff(),
            token_budget: None,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(format!("gateway.base_url must be an http(s) URL, got {:?}", self.base_url));
        }
        if !(self.request_timeout_secs > 0.0 && self.request_timeout_secs.is_finite()) {
            return Err("gateway.request_timeout_secs must be positive".into());
        }
        if let Some(b) = &self.token_budget {
            b.check()?;
        }
        Ok(())
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// The live backend.
pub struct GatewayClient {
    config: GatewayConfig,
    http: reqwest::blocking::Client,
    used: Mutex<TokenUsage>,
}

impl fmt::Debug for GatewayClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GatewayClient").field("config", &self.config).field("used", &self.used()).finish()
    }
}

impl GatewayClient {
    pub fn new(config: GatewayConfig) -> Result<Self, BackendError> {
        config.check().map_err(BackendError::Other)?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.request_timeout_secs))
            .build()
            .map_err(|e| BackendError::Other(format!("http client: {e}")))?;
        Ok(Self { config, http, used: Mutex::new(TokenUsage::ZERO) })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Usage seen by this client, including any seeded prior usage.
    pub fn used(&self) -> TokenUsage {
        *self.used.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.config.backoff_base_ms.saturating_mul(1u64 << retry.min(16)))
    }

    fn send_once(&self, body: &Value) -> Result<(u16, String), String> {
        let mut req = self.http.post(self.config.endpoint()).json(body);
        if !self.config.api_key.is_empty() {
            req = req.bearer_auth(self.config.api_key.expose());
        }
        let resp = req.send().map_err(|e| self.config.api_key.redact(&e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| self.config.api_key.redact(&e.to_string()))?;
        Ok((status, text))
    }
}

/// Parses a chat-completion response body.
pub fn parse_response(body: &str) -> Result<Completion, BackendError> {
    let v: Value = serde_json::from_str(body).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::MalformedResponse("missing choices[0].message.content".into()))?;
    let mut warnings = Vec::new();
    let usage = match v.get("usage").filter(|u| u.is_object()) {
        None => {
            warnings.push("response carried no usage object; recorded as 0/0".to_string());
            TokenUsage::ZERO
        }
        Some(u) => {
            let field = |a: &str, b: &str| u.get(a).or_else(|| u.get(b)).and_then(Value::as_u64);
            match (field("prompt_tokens", "input_tokens"), field("completion_tokens", "output_tokens")) {
                (Some(i), Some(o)) => TokenUsage::new(i, o),
                _ => return Err(BackendError::MalformedResponse("usage object lacks token counts".into())),
            }
        }
    };
    Ok(Completion { text: text.to_string(), usage, warnings })
}

impl CompletionBackend for GatewayClient {
    fn kind(&self) -> BackendKind {
        BackendKind::LiveGateway
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        if let Some(b) = &self.config.token_budget {
            if b.exhausted(self.used()) {
                return Err(BackendError::BudgetExhausted);
            }
        }
        let body = request_body(request);
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff(attempt - 1));
            }
            match self.send_once(&body) {
                Err(e) => last = format!("network error: {e}"),
                Ok((status, text)) => match status {
                    200..=299 => {
                        let completion = parse_response(&text)?;
                        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
                        *used += completion.usage;
                        return Ok(completion);
                    }
                    401 | 403 => return Err(BackendError::AuthFailure(status)),
                    429 | 500..=599 => last = format!("status {status}"),
                    _ => {
                        let mut body = self.config.api_key.redact(&text);
                        body.truncate(512);
                        return Err(BackendError::Rejected { status, body });
                    }
                },
            }
        }
        Err(BackendError::TransientExhausted { attempts: self.config.max_retries + 1, last })
    }

    fn seed_usage(&self, prior: TokenUsage) {
        *self.used.lock().unwrap_or_else(|e| e.into_inner()) += prior;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub node: NodeId,
    pub operator: OperatorKind,
    pub usage: TokenUsage,
}

/// Per-call token usage for one run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    per_call: Vec<LedgerEntry>,
    totals: TokenUsage,
}

impl TokenLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, node: NodeId, operator: OperatorKind, usage: TokenUsage) {
        self.per_call.push(LedgerEntry { node, operator, usage });
        self.totals += usage;
    }

    pub fn from_journal(events: &[JournalEvent]) -> Self {
        let mut ledger = Self::new();
        for e in events {
            if let EventBody::OperatorCall(c) = &e.body {
                ledger.record(c.node, c.operator, c.usage);
            }
        }
        ledger
    }

    pub fn per_call(&self) -> &[LedgerEntry] {
        &self.per_call
    }

    pub fn totals(&self) -> TokenUsage {
        self.totals
    }

    pub fn report(&self) -> LedgerReport {
        ledger_report(self)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub totals: TokenUsage,
    pub calls: usize,
    pub per_operator: BTreeMap<OperatorKind, TokenUsage>,
    pub per_node: BTreeMap<NodeId, TokenUsage>,
}

pub fn ledger_report(ledger: &TokenLedger) -> LedgerReport {
    let mut r = LedgerReport { calls: ledger.per_call.len(), ..Default::default() };
    for e in &ledger.per_call {
        r.totals += e.usage;
        *r.per_operator.entry(e.operator).or_default() += e.usage;
        *r.per_node.entry(e.node).or_default() += e.usage;
    }
    r
}

/// Formats a token count the way reports print it: `1.36M`, `230.0K`, `950`.
pub fn format_tokens(n: u64) -> String {
    if n >= 1_000_000 {
        format!("{:.2}M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.1}K", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_sums() {
        let mut l = TokenLedger::new();
        assert_eq!(l.report().totals, TokenUsage::ZERO);
        l.record(NodeId(1), OperatorKind::IdeaGenerator, TokenUsage::new(100, 20));
        l.record(NodeId(2), OperatorKind::CodeCreator, TokenUsage::new(50, 10));
        let r = l.report();
        assert_eq!(r.totals, TokenUsage::new(150, 30));
        assert_eq!(r.per_node[&NodeId(1)], TokenUsage::new(100, 20));
        assert_eq!(r.per_operator[&OperatorKind::CodeCreator], TokenUsage::new(50, 10));
        assert_eq!(r.calls, 2);
    }

    #[test]
    fn token_format() {
        assert_eq!(format_tokens(1_360_000), "1.36M");
        assert_eq!(format_tokens(1_590_000), "1.59M");
        assert_eq!(format_tokens(230_000), "230.0K");
        assert_eq!(format_tokens(12), "12");
    }

    #[test]
    fn budget_caps() {
        let b = TokenBudget { max_total: Some(10), ..Default::default() };
        assert!(b.exhausted(TokenUsage::new(6, 4)));
        assert!(!b.exhausted(TokenUsage::new(6, 3)));
        assert!(TokenBudget { max_input: Some(0), ..Default::default() }.check().is_err());
    }

    #[test]
    fn response_parsing() {
        let c = parse_response(
            r#"{"choices":[{"message":{"content":"hi"}}],"usage":{"prompt_tokens":100,"completion_tokens":20}}"#,
        )
        .unwrap();
        assert_eq!(c.text, "hi");
        assert_eq!(c.usage, TokenUsage::new(100, 20));
        let c = parse_response(r#"{"choices":[{"message":{"content":"hi"}}]}"#).unwrap();
        assert_eq!(c.usage, TokenUsage::ZERO);
        assert_eq!(c.warnings.len(), 1);
        assert!(matches!(parse_response("{}"), Err(BackendError::MalformedResponse(_))));
        assert!(matches!(parse_response("not json"), Err(BackendError::MalformedResponse(_))));
    }

    #[test]
    fn secret_is_hidden() {
        let s = SecretString::new("sk-very-secret");
        assert!(!format!("{s:?}").contains("very"));
        let mut cfg = GatewayConfig::new("http://localhost:1");
        cfg.api_key = s.clone();
        assert!(!format!("{cfg:?}").contains("very"));
        assert!(!serde_json::to_string(&cfg).unwrap().contains("very"));
        assert_eq!(s.redact("key=sk-very-secret"), "key=[redacted]");
    }

    #[test]
    fn config_checks() {
        assert!(GatewayConfig::new("ftp://x").check().is_err());
        let mut c = GatewayConfig::new("http://x/");
        assert_eq!(c.endpoint(), "http://x/chat/completions");
        c.request_timeout_secs = 0.0;
        assert!(c.check().is_err());
    }
}
