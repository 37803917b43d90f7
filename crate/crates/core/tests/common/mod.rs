#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use sepdd::clock::FixedClock;
use sepdd::engine::{EngineConfig, Evolution, RunBudget, TaskSpec};
use sepdd::fixtures::synthetic::{synthetic_backend, synthetic_code, synthetic_sandbox, FaultPlan};
use sepdd::journal::{Journal, RunOutcome};
use sepdd::model::{NodeId, TokenUsage};
use sepdd::operators::{CompletionBackend, ModelRouting, Operators, SamplingParams};
use serde_json::{json, Value};

/// One HTTP request as the mock server saw it.
#[derive(Debug, Clone)]
pub struct Captured {
    pub headers: Vec<String>,
    pub body: String,
}

pub struct Reply {
    pub status: u16,
    pub body: String,
}

impl Reply {
    pub fn ok(body: Value) -> Self {
        Reply { status: 200, body: body.to_string() }
    }

    pub fn status(status: u16) -> Self {
        Reply { status, body: json!({"error": {"message": "try later"}}).to_string() }
    }
}

/// Minimal HTTP/1.1 server on 127.0.0.1. The responder gets the 0-based
/// request number and the request body.
pub struct MockServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Captured>>>,
}

impl MockServer {
    pub fn start(responder: impl Fn(usize, &str) -> Reply + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests: Arc<Mutex<Vec<Captured>>> = Arc::default();
        let seen = requests.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let n = {
                    let captured = read_request(&stream);
                    let mut r = seen.lock().unwrap();
                    r.push(captured);
                    r.len() - 1
                };
                let body = seen.lock().unwrap()[n].body.clone();
                let reply = responder(n, &body);
                write_reply(stream, &reply);
            }
        });
        MockServer { url, requests }
    }

    pub fn count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

fn read_request(stream: &TcpStream) -> Captured {
    let mut reader = BufReader::new(stream);
    let mut headers = Vec::new();
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            break;
        }
        let line = line.trim_end().to_string();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap_or(0);
        }
        headers.push(line);
    }
    let mut body = vec![0u8; len];
    let _ = reader.read_exact(&mut body);
    Captured { headers, body: String::from_utf8_lossy(&body).into_owned() }
}

fn write_reply(mut stream: TcpStream, reply: &Reply) {
    let head = format!(
        "HTTP/1.1 {} Mock\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        reply.status,
        reply.body.len()
    );
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(reply.body.as_bytes());
    let _ = stream.flush();
}

/// A chat-completion response body.
pub fn chat_body(text: &str, usage: TokenUsage) -> Value {
    json!({
        "id": "cmpl-1",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": usage.input_tokens, "completion_tokens": usage.output_tokens,
                  "total_tokens": usage.total()},
    })
}

/// Node id named in the prompt's expansion line.
pub fn prompt_node(body: &str) -> Option<u32> {
    let v: Value = serde_json::from_str(body).ok()?;
    let msgs = v["messages"].as_array()?;
    msgs.iter().filter_map(|m| m["content"].as_str()).find_map(|c| {
        let rest = &c[c.find("- Expansion: node ")? + "- Expansion: node ".len()..];
        rest.split(|ch: char| !ch.is_ascii_digit()).next()?.parse().ok()
    })
}

fn system_prompt(body: &str) -> String {
    let v: Value = serde_json::from_str(body).unwrap_or(Value::Null);
    v["messages"][0]["content"].as_str().unwrap_or_default().to_string()
}

/// Plays a competent model over HTTP for synthetic tasks: programs come
/// from the synthetic fixture, so the synthetic sandbox can run them.
pub fn model_reply(seed: u64, body: &str) -> String {
    let system = system_prompt(body);
    let node = NodeId(prompt_node(body).unwrap_or(0));
    let code = || format!("```sh\n{}```", synthetic_code(seed, &FaultPlan::none(), node, 0));
    if system.contains("strategy planner") {
        "1. Cosine schedule: loss plateaus\n2. Mosaic augmentation: rare classes".into()
    } else if system.contains("expert ML engineer") || system.contains("You debug") {
        code()
    } else if system.contains("You review") {
        "VERDICT: OK\nThe run printed its metrics.".into()
    } else {
        let v: Value = serde_json::from_str(body).unwrap_or(Value::Null);
        let user = v["messages"][1]["content"].as_str().unwrap_or_default().to_string();
        let mut s = String::new();
        for l in user.lines().filter(|l| l.starts_with("### Candidate ")) {
            s.push_str(&format!("{l}\nStrengths: stable\nWeaknesses: slow\n"));
        }
        s.push_str("### Merged Suggestions\n1. Combine both schedules: complementary\n");
        s
    }
}

/// Usage the mock reports for request body `body`.
pub fn mock_usage(body: &str) -> TokenUsage {
    TokenUsage::new(body.len() as u64 / 4 + 1, 37)
}

pub fn task() -> TaskSpec {
    TaskSpec {
        description: "Detect defects on synthetic panels.".into(),
        data_description: "Generated in memory.".into(),
        requirements: "Print mAP50 and mAP50-95.".into(),
    }
}

pub fn synthetic_config(seed: u64, max_nodes: usize, depth: u32) -> EngineConfig {
    let mut c = EngineConfig::new(format!("synthetic-{seed}"), task());
    c.budget = RunBudget { max_nodes, max_debug_depth: depth, wall_clock_limit_secs: None };
    c
}

pub fn operators(backend: Arc<dyn CompletionBackend>) -> Operators {
    Operators::new(backend, ModelRouting::default(), SamplingParams::default())
}

pub fn synthetic_engine(seed: u64, faults: FaultPlan, max_nodes: usize, depth: u32) -> Evolution {
    Evolution::new(
        synthetic_config(seed, max_nodes, depth),
        operators(Arc::new(synthetic_backend(seed, faults))),
        Arc::new(synthetic_sandbox()),
    )
    .expect("valid engine config")
}

pub fn clock() -> Arc<FixedClock> {
    Arc::new(FixedClock::default())
}

pub fn run_synthetic(seed: u64, faults: FaultPlan, max_nodes: usize, depth: u32) -> (Journal, RunOutcome) {
    let engine = synthetic_engine(seed, faults, max_nodes, depth);
    let mut journal = Journal::in_memory(clock());
    let outcome = engine.run(&mut journal, None).expect("synthetic run");
    (journal, outcome)
}
