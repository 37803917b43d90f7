//! Drives the search through the HTTP gateway client. With `SEPDD_BASE_URL`
//! and `SEPDD_API_KEY` set it talks to a real OpenAI-compatible endpoint;
//! otherwise it starts a local stand-in that throttles every third request.
//!
//! ```bash
//! cargo run --example live_gateway
//! SEPDD_BASE_URL=https://gateway.example/v1 SEPDD_API_KEY=... cargo run --example live_gateway
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;

use serde_json::{json, Value};

use sepdd::clock::SystemClock;
use sepdd::fixtures::synthetic::{synthetic_code, synthetic_sandbox, FaultPlan};
use sepdd::gateway::{format_tokens, GatewayClient, GatewayConfig, SecretString, TokenBudget};
use sepdd::operators::{ModelRouting, Operators, SamplingParams};
use sepdd::report::build_report;
use sepdd::{EngineConfig, Evolution, Journal, NodeId, RunBudget, TaskSpec};

fn reply_for(body: &Value) -> String {
    let system = body["messages"][0]["content"].as_str().unwrap_or_default();
    let user = body["messages"][1]["content"].as_str().unwrap_or_default();
    let node = user
        .split("- Expansion: node ")
        .nth(1)
        .and_then(|r| r.split(|c: char| !c.is_ascii_digit()).next())
        .and_then(|n| n.parse().ok())
        .unwrap_or(0);
    if system.contains("strategy planner") {
        "1. Larger input size: small defects are missed\n2. Class-balanced sampling: rare classes".into()
    } else if system.contains("You review") {
        "VERDICT: OK\nMetrics were printed.".into()
    } else if system.contains("expert ML engineer") || system.contains("You debug") {
        format!("```sh\n{}```", synthetic_code(2, &FaultPlan::none(), NodeId(node), 0))
    } else {
        let mut s: String = user
            .lines()
            .filter(|l| l.starts_with("### Candidate "))
            .map(|l| format!("{l}\nStrengths: accurate\nWeaknesses: slow\n"))
            .collect();
        s.push_str("### Merged Suggestions\n1. Combine both augmentations: complementary\n");
        s
    }
}

/// A throwaway chat-completions endpoint on 127.0.0.1.
fn local_endpoint() -> anyhow::Result<String> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let url = format!("http://{}", listener.local_addr()?);
    thread::spawn(move || {
        for (n, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(&stream);
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line.trim().is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0; len];
            let _ = reader.read_exact(&mut body);
            let (status, payload) = if n % 3 == 2 {
                (429, json!({"error": {"message": "slow down"}}))
            } else {
                let req: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
                let prompt_tokens = body.len() as u64 / 4;
                (
                    200,
                    json!({
                        "choices": [{"message": {"role": "assistant", "content": reply_for(&req)}}],
                        "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": 64},
                    }),
                )
            };
            let payload = payload.to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    Ok(url)
}

fn main() -> anyhow::Result<()> {
    let (url, key) = match std::env::var("SEPDD_BASE_URL") {
        Ok(url) => (url, SecretString::from_env().unwrap_or_default()),
        Err(_) => (local_endpoint()?, SecretString::new("local-demo-key")),
    };
    let mut gw = GatewayConfig::new(&url);
    gw.api_key = key;
    gw.backoff_base_ms = 5;
    gw.token_budget = Some(TokenBudget { max_total: Some(200_000), ..Default::default() });
    let client = Arc::new(GatewayClient::new(gw)?);

    let task = TaskSpec {
        description: "Detect cracks in ceramic tiles.".into(),
        data_description: "Synthetic tile crops.".into(),
        requirements: "Report mAP50 and mAP50-95.".into(),
    };
    let mut cfg = EngineConfig::new("live-gateway", task);
    cfg.budget = RunBudget { max_nodes: 6, max_debug_depth: 2, wall_clock_limit_secs: None };
    let ops = Operators::new(client.clone(), ModelRouting::default(), SamplingParams::default());
    let mut journal = Journal::in_memory(Arc::new(SystemClock));
    let outcome = Evolution::new(cfg, ops, Arc::new(synthetic_sandbox()))?.run(&mut journal, None)?;

    let report = build_report(journal.events())?;
    println!("endpoint {url}");
    println!("best {:?}, edge {}, stop {:?}", outcome.best, report.primary_edge_text(), outcome.stop_reason);
    let used = client.used();
    println!(
        "client counted {} in / {} out; journal ledger {} calls, {} total",
        format_tokens(used.input_tokens),
        format_tokens(used.output_tokens),
        report.tokens.calls,
        format_tokens(report.tokens.totals.total())
    );
    Ok(())
}
