//! Replay of one evolution run on the EF industrial defect dataset.
//!
//! The tree shape, each node's metrics, the single invalid node and the
//! per-call token usage are fixed data. Ideas, code and analyses are
//! synthesized from that data so that every stage of the node workflow runs
//! for real.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::engine::{EngineConfig, EngineError, Evolution, ExpansionPolicy, RunBudget, TaskSpec};
use crate::journal::{Journal, RunOutcome};
use crate::model::{NodeId, TokenUsage};
use crate::operators::{
    BackendError, Completion, CompletionBackend, CompletionRequest, ModelRouting, OperatorKind, Operators,
    SamplingParams, ScriptedBackend,
};
use crate::sandbox::{Sandbox, ScriptedRun, ScriptedSandbox};
use crate::strategy::Expansion;

use super::{fence, is_full_run_analysis};

/// One node of the recorded tree: id, primary parent, and
/// `(mAP50-95, mAP50)` for valid nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfNode {
    pub id: u32,
    pub parent: u32,
    pub metrics: Option<(f64, f64)>,
}

const fn valid(id: u32, parent: u32, map50_95: f64, map50: f64) -> EfNode {
    EfNode { id, parent, metrics: Some((map50_95, map50)) }
}

pub const EF_TREE: [EfNode; 18] = [
    valid(1, 0, 0.2764, 0.4433),
    valid(2, 0, 0.2718, 0.4325),
    valid(3, 2, 0.2827, 0.4723),
    valid(4, 2, 0.2685, 0.4106),
    valid(5, 1, 0.4106, 0.4106),
    valid(6, 1, 0.2970, 0.4578),
    valid(7, 4, 0.2802, 0.4389),
    valid(8, 4, 0.2433, 0.4114),
    valid(9, 6, 0.3051, 0.4592),
    valid(10, 6, 0.3069, 0.4954),
    EfNode { id: 11, parent: 10, metrics: None },
    valid(12, 10, 0.2767, 0.4549),
    valid(13, 9, 0.3045, 0.4609),
    valid(14, 9, 0.2552, 0.3919),
    valid(15, 10, 0.2777, 0.4581),
    valid(16, 10, 0.2904, 0.4909),
    valid(17, 13, 0.2942, 0.4561),
    valid(18, 13, 0.2935, 0.4736),
];

pub const INVALID_NODE: u32 = 11;

pub fn ef_node(id: u32) -> Option<&'static EfNode> {
    EF_TREE.iter().find(|n| n.id == id)
}

/// The recorded expansion order: children of the root are drafts, the rest
/// improve their parent.
pub fn ef_plan() -> BTreeMap<NodeId, Expansion> {
    EF_TREE
        .iter()
        .map(|n| {
            let e = if n.parent == 0 { Expansion::Draft } else { Expansion::Improve(NodeId(n.parent)) };
            (NodeId(n.id), e)
        })
        .collect()
}

const IDEAS: [(&str, &str); 12] = [
    ("Raise input resolution to 1280", "thin finger interruptions vanish at 640"),
    ("Mosaic and copy-paste augmentation", "rare crack classes need more instances per batch"),
    ("Cosine learning-rate schedule with warmup", "the loss plateaus early with a step schedule"),
    ("Increase box loss gain", "localization of elongated defects is the main error source"),
    ("Class-balanced sampling", "dark-spot images dominate the training split"),
    ("Switch optimizer to AdamW", "SGD oscillates at the current batch size"),
    ("Label smoothing 0.05", "annotator disagreement between scratch and crack"),
    ("Freeze backbone for the first epochs", "stabilizes early training on the small split"),
    ("Anchor-free head with decoupled branches", "better recall on very small defects"),
    ("Test-time flip augmentation", "cheap gain on symmetric cell layouts"),
    ("EMA of weights", "reduces variance of the final checkpoint"),
    ("Longer training, 150 epochs", "validation mAP is still rising at the end"),
];

fn ideas_for(id: u32) -> String {
    (0..3)
        .map(|i| {
            let (t, r) = IDEAS[(id as usize * 5 + i * 7) % IDEAS.len()];
            format!("{}. {t}: {r}", i + 1)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Candidate program of `id` after `attempt` refinements.
pub fn ef_code(id: u32, attempt: u32) -> String {
    let node = ef_node(id).expect("node of the recorded tree");
    let (title, _) = IDEAS[(id as usize * 5) % IDEAS.len()];
    let mut s =
        format!("#!/bin/sh\n# EF defect detector, candidate of node {id}, revision {attempt}\n# strategy: {title}\n");
    match node.metrics {
        Some((m5095, m50)) => {
            s.push_str("if [ -n \"$SEPDD_DEBUG\" ]; then\n");
            s.push_str("  echo \"debug: 1 epoch on 32 images\"\n");
            s.push_str("  echo \"SEPDD_METRIC mAP50=0.0125\"\n");
            s.push_str("  exit 0\nfi\n");
            s.push_str("echo \"training: 100 epochs\"\n");
            s.push_str(&format!("echo \"SEPDD_METRIC mAP50-95={m5095:.4}\"\n"));
            s.push_str(&format!("echo \"SEPDD_METRIC mAP50={m50:.4}\"\n"));
        }
        None => {
            let batch = 64 >> attempt;
            s.push_str("if [ -n \"$SEPDD_DEBUG\" ]; then\n");
            s.push_str("  echo \"debug: 1 epoch on 32 images\"\n");
            s.push_str("  echo \"SEPDD_METRIC mAP50=0.0110\"\n");
            s.push_str("  exit 0\nfi\n");
            s.push_str(&format!("echo \"training: imgsz 1536, batch {batch}\"\n"));
            s.push_str("echo \"RuntimeError: CUDA out of memory\" >&2\n");
            s.push_str("exit 1\n");
        }
    }
    s
}

/// Outcome of every candidate program, as the sandbox would observe it.
pub fn ef_runs() -> HashMap<String, ScriptedRun> {
    let debug_stdout = |m: &str| format!("debug: 1 epoch on 32 images\nSEPDD_METRIC mAP50={m}\n");
    let mut t = HashMap::new();
    for n in &EF_TREE {
        match n.metrics {
            Some((m5095, m50)) => {
                let mut run = ScriptedRun::succeed(format!(
                    "training: 100 epochs\nSEPDD_METRIC mAP50-95={m5095:.4}\nSEPDD_METRIC mAP50={m50:.4}\n"
                ));
                run.debug.stdout = debug_stdout("0.0125");
                t.insert(ef_code(n.id, 0), run);
            }
            None => {
                for attempt in 0..=3 {
                    let mut run = ScriptedRun::crash_full(debug_stdout("0.0110"), "RuntimeError: CUDA out of memory\n");
                    run.full.stdout = format!("training: imgsz 1536, batch {}\n", 64 >> attempt);
                    t.insert(ef_code(n.id, attempt), run);
                }
            }
        }
    }
    t
}

pub fn ef_sandbox() -> ScriptedSandbox {
    ScriptedSandbox::from_table(ef_runs())
}

/// Key of one recorded call: node, operator, attempt, and for the analyzer
/// whether it judged the validation or the full run.
pub type LedgerKey = (u32, OperatorKind, u32, bool);

const EF_LEDGER: &str = include_str!("ef_ledger.tsv");

/// Recorded token usage of every call in the run.
pub fn ef_ledger() -> BTreeMap<LedgerKey, TokenUsage> {
    let mut out = BTreeMap::new();
    for line in EF_LEDGER.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let op = match f[1] {
            "idea_generator" => OperatorKind::IdeaGenerator,
            "code_creator" => OperatorKind::CodeCreator,
            "analyzer" => OperatorKind::Analyzer,
            "code_refiner" => OperatorKind::CodeRefiner,
            other => panic!("unknown operator {other} in ledger fixture"),
        };
        let key = (f[0].parse().expect("node"), op, f[2].parse().expect("attempt"), f[3] == "full");
        out.insert(key, TokenUsage::new(f[4].parse().expect("input"), f[5].parse().expect("output")));
    }
    out
}

/// The scripted model: derives each reply from the node and attempt the
/// request is made for.
pub fn ef_backend() -> ScriptedBackend {
    let ledger = ef_ledger();
    ScriptedBackend::new(move |req: &CompletionRequest| {
        let id = req.node.ok_or_else(|| BackendError::Other("request without node".into()))?.0;
        let node = ef_node(id).ok_or_else(|| BackendError::Other(format!("node {id} is not in the recorded run")))?;
        let full = req.operator == OperatorKind::Analyzer && is_full_run_analysis(req);
        let text = match req.operator {
            OperatorKind::IdeaGenerator => ideas_for(id),
            OperatorKind::CodeCreator => format!("Pipeline for node {id}:\n{}", fence("sh", &ef_code(id, 0))),
            OperatorKind::CodeRefiner => {
                format!("Lower memory use and retry:\n{}", fence("sh", &ef_code(id, req.attempt)))
            }
            OperatorKind::Analyzer => {
                match (node.metrics, full) {
                    (_, false) => "VERDICT: OK\nDebug run finished and printed the primary metric.".to_string(),
                    (Some((_, m50)), true) => {
                        format!("VERDICT: OK\nFull run converged; mAP50 {m50:.4}. Recall on small defects limits the score.")
                    }
                    (None, true) => "VERDICT: BUGGY\nThe full run ran out of GPU memory at the configured resolution \
                     and batch size; reduce memory use."
                        .to_string(),
                }
            }
            OperatorKind::MergeAnalysis => return Err(BackendError::Other("the recorded run has no merges".into())),
        };
        let usage = *ledger
            .get(&(id, req.operator, req.attempt, full))
            .ok_or_else(|| BackendError::Other(format!("no recorded usage for node {id} {}", req.operator)))?;
        Ok(Completion::new(text, usage))
    })
}

pub fn ef_task() -> TaskSpec {
    TaskSpec {
        description: "Detect surface defects on EF industrial inspection images with a YOLO-style detector.".into(),
        data_description: "Train/val splits of labelled inspection images, YOLO box format, read from SEPDD_DATA_DIR."
            .into(),
        requirements: "Report mAP50 and mAP50-95 on the validation split. Training must fit on one 24 GB GPU.".into(),
    }
}

pub fn ef_engine_config() -> EngineConfig {
    let mut c = EngineConfig::new("ef-industrial", ef_task());
    c.policy = ExpansionPolicy::Scripted(ef_plan());
    c.budget = RunBudget { max_nodes: EF_TREE.len(), max_debug_depth: 3, wall_clock_limit_secs: None };
    c
}

pub fn ef_operators(backend: Arc<dyn CompletionBackend>) -> Operators {
    Operators::new(backend, ModelRouting::default(), SamplingParams::default())
}

/// The replay engine over `sandbox` (normally [`ef_sandbox`]).
pub fn ef_evolution(sandbox: Arc<dyn Sandbox>) -> Result<Evolution, EngineError> {
    Evolution::new(ef_engine_config(), ef_operators(Arc::new(ef_backend())), sandbox)
}

/// Runs the full replay into `journal`.
pub fn run_ef_replay(journal: &mut Journal) -> Result<RunOutcome, EngineError> {
    ef_evolution(Arc::new(ef_sandbox()))?.run(journal, None)
}
