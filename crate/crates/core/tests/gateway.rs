mod common;

use std::net::TcpListener;
use std::sync::Arc;

use sepdd::gateway::{GatewayClient, GatewayConfig, SecretString, TokenBudget};
use sepdd::journal::{EventBody, Journal};
use sepdd::model::TokenUsage;
use sepdd::operators::{
    BackendError, CompletionBackend, CompletionRequest, Message, OperatorKind, RecordingBackend, SamplingParams,
};
use sepdd::Evolution;
use serde_json::{json, Value};

use common::{chat_body, clock, mock_usage, model_reply, operators, synthetic_config, MockServer, Reply};

const KEY: &str = "sk-test-7f3a9c1e5b";

fn request() -> CompletionRequest {
    CompletionRequest {
        operator: OperatorKind::IdeaGenerator,
        model: "qwen3.5-plus".into(),
        messages: vec![Message::system("plan"), Message::user("suggest")],
        sampling: SamplingParams::default(),
        node: None,
        attempt: 0,
    }
}

fn client(url: &str) -> GatewayClient {
    let mut c = GatewayConfig::new(url);
    c.backoff_base_ms = 1;
    c.api_key = SecretString::new(KEY);
    GatewayClient::new(c).unwrap()
}

#[test]
fn success_records_usage_and_sends_key() {
    let server = MockServer::start(|_, _| Reply::ok(chat_body("1. a: b", TokenUsage::new(120, 30))));
    let c = client(&server.url);
    let out = c.complete(&request()).unwrap();
    assert_eq!(out.text, "1. a: b");
    assert_eq!(out.usage, TokenUsage::new(120, 30));
    assert_eq!(c.used(), TokenUsage::new(120, 30));
    let reqs = server.requests.lock().unwrap();
    assert_eq!(reqs.len(), 1);
    assert!(reqs[0].headers.iter().any(|h| h.eq_ignore_ascii_case(&format!("authorization: Bearer {KEY}"))));
    assert!(reqs[0].headers[0].starts_with("POST /chat/completions "));
    let body: Value = serde_json::from_str(&reqs[0].body).unwrap();
    assert_eq!(body["model"], "qwen3.5-plus");
    assert_eq!(body["messages"][1], json!({"role": "user", "content": "suggest"}));
}

#[test]
fn throttling_is_retried() {
    let server =
        MockServer::start(
            |n, _| if n < 2 { Reply::status(429) } else { Reply::ok(chat_body("ok", TokenUsage::new(5, 1))) },
        );
    let out = client(&server.url).complete(&request()).unwrap();
    assert_eq!(out.text, "ok");
    assert_eq!(server.count(), 3);
}

#[test]
fn server_errors_stop_after_the_retry_bound() {
    let server = MockServer::start(|_, _| Reply::status(502));
    let e = client(&server.url).complete(&request()).unwrap_err();
    assert!(matches!(e, BackendError::TransientExhausted { attempts: 5, .. }), "{e}");
    assert_eq!(server.count(), 5);
}

#[test]
fn network_errors_are_retried() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut c = GatewayConfig::new(format!("http://127.0.0.1:{port}"));
    c.backoff_base_ms = 1;
    c.max_retries = 1;
    let e = GatewayClient::new(c).unwrap().complete(&request()).unwrap_err();
    assert!(
        matches!(&e, BackendError::TransientExhausted { attempts: 2, last } if last.starts_with("network error")),
        "{e}"
    );
}

#[test]
fn auth_failure_is_not_retried() {
    let server = MockServer::start(|_, _| Reply::status(401));
    let e = client(&server.url).complete(&request()).unwrap_err();
    assert_eq!(e, BackendError::AuthFailure(401));
    assert!(!e.is_fatal());
    assert_eq!(server.count(), 1);
}

#[test]
fn rejection_body_is_redacted() {
    let server = MockServer::start(|_, _| Reply { status: 400, body: format!("bad request from key {KEY}") });
    let e = client(&server.url).complete(&request()).unwrap_err();
    let BackendError::Rejected { status, body } = &e else { panic!("{e}") };
    assert_eq!(*status, 400);
    assert!(!body.contains(KEY) && body.contains("[redacted]"));
}

#[test]
fn missing_usage_counts_zero_with_a_warning() {
    let server =
        MockServer::start(|_, _| Reply::ok(json!({"choices": [{"message": {"role": "assistant", "content": "hi"}}]})));
    let out = client(&server.url).complete(&request()).unwrap();
    assert_eq!(out.usage, TokenUsage::ZERO);
    assert_eq!(out.warnings.len(), 1);
}

#[test]
fn exhausted_budget_sends_nothing() {
    let server = MockServer::start(|_, _| Reply::ok(chat_body("ok", TokenUsage::new(80, 40))));
    let mut c = GatewayConfig::new(&server.url);
    c.token_budget = Some(TokenBudget { max_total: Some(100), ..Default::default() });
    let c = GatewayClient::new(c).unwrap();
    c.complete(&request()).unwrap();
    assert_eq!(c.complete(&request()).unwrap_err(), BackendError::BudgetExhausted);
    assert_eq!(server.count(), 1);

    let fresh = GatewayClient::new(GatewayConfig {
        token_budget: Some(TokenBudget { max_input: Some(10), ..Default::default() }),
        ..GatewayConfig::new(&server.url)
    })
    .unwrap();
    fresh.seed_usage(TokenUsage::new(10, 0));
    assert_eq!(fresh.complete(&request()).unwrap_err(), BackendError::BudgetExhausted);
    assert_eq!(server.count(), 1);
}

#[test]
fn budget_exhaustion_ends_the_run() {
    let seed = 3;
    let server = MockServer::start(move |_, body| Reply::ok(chat_body(&model_reply(seed, body), mock_usage(body))));
    let mut c = GatewayConfig::new(&server.url);
    c.token_budget = Some(TokenBudget { max_total: Some(6_000), ..Default::default() });
    let engine = Evolution::new(
        synthetic_config(seed, 50, 2),
        operators(Arc::new(GatewayClient::new(c).unwrap())),
        Arc::new(sepdd::fixtures::synthetic::synthetic_sandbox()),
    )
    .unwrap();
    let mut j = Journal::in_memory(clock());
    let out = engine.run(&mut j, None).unwrap();
    assert_eq!(out.stop_reason, sepdd::StopReason::TokenBudget);
    assert!(out.node_count < 50);
    assert!(matches!(j.events().last().unwrap().body, EventBody::RunFinished(_)));
}

/// The key must not leak into the journal, recordings, errors or debug output.
#[test]
fn api_key_never_leaks() {
    let seed = 9;
    let server = MockServer::start(move |n, body| {
        if n == 3 {
            return Reply { status: 400, body: format!("echo {KEY}") };
        }
        Reply::ok(chat_body(&model_reply(seed, body), mock_usage(body)))
    });
    let dir = tempfile::tempdir().unwrap();
    let gw = Arc::new(client(&server.url));
    let debug = format!("{gw:?}");
    let rec = Arc::new(RecordingBackend::new(gw, dir.path().join("recordings")).unwrap());
    let engine = Evolution::new(
        synthetic_config(seed, 4, 1),
        operators(rec),
        Arc::new(sepdd::fixtures::synthetic::synthetic_sandbox()),
    )
    .unwrap();
    let mut j = Journal::create(dir.path().join("journal.ndjson"), clock()).unwrap();
    engine.run(&mut j, None).unwrap();
    assert!(!debug.contains(KEY), "{debug}");
    let mut scanned = 0;
    for entry in walk(dir.path()) {
        let text = std::fs::read_to_string(&entry).unwrap();
        assert!(!text.contains(KEY), "{} contains the key", entry.display());
        scanned += 1;
    }
    assert!(scanned > 2);
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
