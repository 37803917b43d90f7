//! Seeded synthetic runs with injectable faults.
//!
//! Every candidate program encodes its own behaviour: the metrics it prints
//! and an optional `# fault:` line. [`synthetic_sandbox`] reads that back, so
//! the sandbox outcome is a pure function of the code and a run is fully
//! determined by the seed and the fault plan.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::model::{NodeId, TokenUsage};
use crate::operators::{BackendError, Completion, CompletionRequest, OperatorKind, ScriptedBackend};
use crate::sandbox::{ExitStatus, ScriptedExit, ScriptedRun, ScriptedSandbox};

use super::{fence, is_full_run_analysis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fault {
    /// Fails the static check.
    Syntax,
    /// Crashes in the debug run.
    DebugCrash,
    /// Passes validation, crashes in the full run.
    FullCrash,
    /// Full run exceeds its time limit.
    Timeout,
    /// Exits 0 without printing the primary metric.
    Silent,
}

impl Fault {
    pub const ALL: [Fault; 5] = [Fault::Syntax, Fault::DebugCrash, Fault::FullCrash, Fault::Timeout, Fault::Silent];

    fn tag(self) -> &'static str {
        match self {
            Fault::Syntax => "syntax",
            Fault::DebugCrash => "debug_crash",
            Fault::FullCrash => "full_crash",
            Fault::Timeout => "timeout",
            Fault::Silent => "silent",
        }
    }

    fn from_tag(s: &str) -> Option<Fault> {
        Fault::ALL.into_iter().find(|f| f.tag() == s)
    }
}

type FaultFn = dyn Fn(NodeId, u32) -> Option<Fault> + Send + Sync;

/// Which programs are faulty: a function of node id and debug attempt.
#[derive(Clone)]
pub struct FaultPlan(Arc<FaultFn>);

impl fmt::Debug for FaultPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FaultPlan")
    }
}

impl FaultPlan {
    pub fn none() -> Self {
        Self::from_fn(|_, _| None)
    }

    pub fn from_fn(f: impl Fn(NodeId, u32) -> Option<Fault> + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    /// Nodes in `nodes` fail on every attempt.
    pub fn always(nodes: impl IntoIterator<Item = u32>, fault: Fault) -> Self {
        let set: BTreeSet<u32> = nodes.into_iter().collect();
        Self::from_fn(move |n, _| set.contains(&n.0).then_some(fault))
    }

    /// Exactly the listed `(node, attempt)` programs fail.
    pub fn at(points: impl IntoIterator<Item = (u32, u32, Fault)>) -> Self {
        let v: Vec<(u32, u32, Fault)> = points.into_iter().collect();
        Self::from_fn(move |n, a| v.iter().find(|(vn, va, _)| *vn == n.0 && *va == a).map(|x| x.2))
    }

    /// Each program independently faulty with probability `rate`, decided by
    /// a hash of the seed, node and attempt.
    pub fn random(seed: u64, rate: f64) -> Self {
        Self::from_fn(move |n, a| {
            let u = unit(seed ^ 0x5eed_fa17, n.0, a);
            (u < rate).then(|| Fault::ALL[(unit(seed ^ 0xfa, n.0, a) * 5.0) as usize % 5])
        })
    }

    /// Nodes whose every attempt fails.
    pub fn nodes_always(seed: u64, rate: f64) -> Self {
        Self::from_fn(move |n, _| {
            (unit(seed ^ 0xdead, n.0, 0) < rate).then(|| Fault::ALL[(unit(seed ^ 0xbeef, n.0, 0) * 5.0) as usize % 5])
        })
    }

    pub fn fault(&self, node: NodeId, attempt: u32) -> Option<Fault> {
        (self.0)(node, attempt)
    }
}

/// Deterministic value in `[0, 1)`.
fn unit(seed: u64, node: u32, attempt: u32) -> f64 {
    let d = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(node.to_le_bytes())
        .chain_update(attempt.to_le_bytes())
        .finalize();
    let v = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (v >> 11) as f64 / (1u64 << 53) as f64
}

/// Metrics `(mAP50-95, mAP50)` a healthy program of this node prints.
pub fn synthetic_metrics(seed: u64, node: NodeId, attempt: u32) -> (f64, f64) {
    let m50 = ((0.30 + 0.25 * unit(seed, node.0, attempt)) * 10_000.0).round() / 10_000.0;
    let m5095 = ((m50 * 0.62) * 10_000.0).round() / 10_000.0;
    (m5095, m50)
}

/// Program for `node` after `attempt` refinements.
pub fn synthetic_code(seed: u64, faults: &FaultPlan, node: NodeId, attempt: u32) -> String {
    let (m5095, m50) = synthetic_metrics(seed, node, attempt);
    let mut s = format!("#!/bin/sh\n# synthetic candidate of node {node}, revision {attempt}\n");
    match faults.fault(node, attempt) {
        None => {}
        Some(f) => s.push_str(&format!("# fault: {}\n", f.tag())),
    }
    match faults.fault(node, attempt) {
        Some(Fault::Syntax) => s.push_str("if then fi\n"),
        Some(Fault::DebugCrash) => s.push_str("echo \"ValueError: bad shape\" >&2\nexit 2\n"),
        Some(Fault::FullCrash) => {
            s.push_str("if [ -z \"$SEPDD_DEBUG\" ]; then echo \"crash\" >&2; exit 1; fi\n");
            s.push_str(&format!("echo \"SEPDD_METRIC mAP50={m50:.4}\"\n"));
        }
        Some(Fault::Timeout) => {
            s.push_str("if [ -z \"$SEPDD_DEBUG\" ]; then sleep 3600; fi\n");
            s.push_str(&format!("echo \"SEPDD_METRIC mAP50={m50:.4}\"\n"));
        }
        Some(Fault::Silent) => s.push_str("echo \"done\"\n"),
        None => {
            s.push_str(&format!("echo \"SEPDD_METRIC mAP50-95={m5095:.4}\"\n"));
            s.push_str(&format!("echo \"SEPDD_METRIC mAP50={m50:.4}\"\n"));
        }
    }
    s
}

/// Reads the behaviour back out of a synthetic program.
pub fn synthetic_outcome(code: &str) -> Option<ScriptedRun> {
    if !code.contains("# synthetic candidate") {
        return None;
    }
    let fault = code.lines().find_map(|l| l.strip_prefix("# fault: ")).and_then(Fault::from_tag);
    let echoed: String = code
        .lines()
        .filter_map(|l| l.strip_prefix("echo \"SEPDD_METRIC ").and_then(|r| r.strip_suffix('"')))
        .map(|m| format!("SEPDD_METRIC {m}\n"))
        .collect();
    Some(match fault {
        None => ScriptedRun::succeed(echoed),
        Some(Fault::Syntax) => ScriptedRun::syntax("syntax error near unexpected token `then'"),
        Some(Fault::DebugCrash) => {
            let mut r = ScriptedRun::crash_debug("ValueError: bad shape\n");
            r.debug.exit = ExitStatus::Code(2);
            r.full.exit = ExitStatus::Code(2);
            r
        }
        Some(Fault::FullCrash) => ScriptedRun::crash_full(echoed, "crash\n"),
        Some(Fault::Timeout) => {
            ScriptedRun { syntax_error: None, debug: ScriptedExit::ok(echoed), full: ScriptedExit::timeout() }
        }
        Some(Fault::Silent) => ScriptedRun::succeed("done\n"),
    })
}

pub fn synthetic_sandbox() -> ScriptedSandbox {
    ScriptedSandbox::from_fn(synthetic_outcome)
}

fn candidate_ids(text: &str) -> Vec<u32> {
    text.lines()
        .filter_map(|l| l.strip_prefix("### Candidate "))
        .filter_map(|r| r.split(|c: char| !c.is_ascii_digit()).next()?.parse().ok())
        .collect()
}

/// Rough token count: one token per four bytes, at least one.
fn approx_tokens(s: &str) -> u64 {
    (s.len() as u64).div_ceil(4).max(1)
}

/// The scripted model for synthetic runs. Usage is derived from prompt and
/// reply length.
pub fn synthetic_backend(seed: u64, faults: FaultPlan) -> ScriptedBackend {
    synthetic_backend_with(seed, faults, HashSet::new())
}

/// Like [`synthetic_backend`], but the listed operators reply with text
/// that cannot be parsed.
pub fn synthetic_backend_with(seed: u64, faults: FaultPlan, garbled: HashSet<OperatorKind>) -> ScriptedBackend {
    ScriptedBackend::new(move |req: &CompletionRequest| {
        let node = req.node.ok_or_else(|| BackendError::Other("request without node".into()))?;
        let prompt = req.user_text();
        let text = if garbled.contains(&req.operator) {
            "I am not sure what you mean.".to_string()
        } else {
            match req.operator {
                OperatorKind::IdeaGenerator => format!(
                    "1. Tune learning rate for node {node}: loss curve is flat\n2. Stronger augmentation: overfitting on small split\n3. Longer schedule: metric still rising"
                ),
                OperatorKind::CodeCreator => fence("sh", &synthetic_code(seed, &faults, node, 0)),
                OperatorKind::CodeRefiner => fence("sh", &synthetic_code(seed, &faults, node, req.attempt)),
                OperatorKind::Analyzer => {
                    let buggy = prompt.contains("deterministic verdict: buggy");
                    let stage = if is_full_run_analysis(req) { "full" } else { "debug" };
                    if buggy {
                        format!("VERDICT: BUGGY\nThe {stage} run failed; fix the reported error.")
                    } else {
                        format!("VERDICT: OK\nThe {stage} run printed the expected metrics.")
                    }
                }
                OperatorKind::MergeAnalysis => {
                    let mut s = String::new();
                    for id in candidate_ids(&prompt) {
                        s.push_str(&format!(
                            "### Candidate {id}\nStrengths: stable training of node {id}\nWeaknesses: misses small defects\n"
                        ));
                    }
                    s.push_str("### Merged Suggestions\n1. Combine the augmentation of the first candidate with the schedule of the second: complementary strengths\n");
                    s
                }
            }
        };
        let usage = TokenUsage::new(approx_tokens(&prompt), approx_tokens(&text));
        Ok(Completion::new(text, usage))
    })
}
