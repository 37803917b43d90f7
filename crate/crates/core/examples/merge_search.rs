//! A top-k search with faulty candidates: shows parent choice, periodic
//! merges of diverse branches, debug repairs and terminated branches.
//!
//! ```bash
//! cargo run --example merge_search
//! ```

use std::sync::Arc;

use sepdd::clock::SystemClock;
use sepdd::fixtures::synthetic::{synthetic_backend, synthetic_sandbox, FaultPlan};
use sepdd::journal::{replay_journal, EventBody};
use sepdd::operators::{ModelRouting, Operators, SamplingParams};
use sepdd::report::render_tree;
use sepdd::{EngineConfig, Evolution, Journal, MetricSpecs, RunBudget, StrategyConfig, TaskSpec};

fn main() -> anyhow::Result<()> {
    let task = TaskSpec {
        description: "Detect missing fasteners on assembly photos.".into(),
        data_description: "Synthetic photos, two classes.".into(),
        requirements: "Report mAP50 and mAP50-95.".into(),
    };
    let mut cfg = EngineConfig::new("merge-search", task);
    cfg.strategy = StrategyConfig { k: 3, merge_period: 4, ..Default::default() };
    cfg.budget = RunBudget { max_nodes: 20, max_debug_depth: 2, wall_clock_limit_secs: None };
    let ops = Operators::new(
        Arc::new(synthetic_backend(17, FaultPlan::nodes_always(17, 0.3))),
        ModelRouting::default(),
        SamplingParams::default(),
    );
    let mut journal = Journal::in_memory(Arc::new(SystemClock));
    let outcome = Evolution::new(cfg, ops, Arc::new(synthetic_sandbox()))?.run(&mut journal, None)?;

    for e in journal.events() {
        match &e.body {
            EventBody::MergePerformed { node, parents, .. } => println!("merge: node {node} from {parents:?}"),
            EventBody::BranchTerminated { node, .. } => println!("branch ending at node {node} terminated"),
            _ => {}
        }
    }
    let graph = replay_journal(journal.events())?;
    print!("\n{}", render_tree(&graph, &MetricSpecs::default()));
    println!("\nbest {:?} via {:?} ({:?})", outcome.best, outcome.primary_edge, outcome.stop_reason);
    Ok(())
}
