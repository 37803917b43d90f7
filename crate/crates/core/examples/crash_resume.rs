//! Interrupts a journaled run at an arbitrary byte, then resumes it. The
//! resumed run reaches the same best node as an uninterrupted one.
//!
//! ```bash
//! cargo run --example crash_resume
//! ```

use std::sync::Arc;

use sepdd::clock::SystemClock;
use sepdd::fixtures::synthetic::{synthetic_backend, synthetic_sandbox, FaultPlan};
use sepdd::journal::EventBody;
use sepdd::operators::{ModelRouting, Operators, SamplingParams};
use sepdd::{EngineConfig, Evolution, Journal, RunBudget, TaskSpec};

fn engine() -> anyhow::Result<Evolution> {
    let task = TaskSpec {
        description: "Detect surface defects on stamped panels.".into(),
        data_description: "Synthetic images with four defect classes.".into(),
        requirements: "Report mAP50 and mAP50-95 on the validation split.".into(),
    };
    let mut cfg = EngineConfig::new("crash-resume", task);
    cfg.budget = RunBudget { max_nodes: 12, max_debug_depth: 2, wall_clock_limit_secs: None };
    let faults = FaultPlan::random(21, 0.3);
    let ops =
        Operators::new(Arc::new(synthetic_backend(21, faults)), ModelRouting::default(), SamplingParams::default());
    Ok(Evolution::new(cfg, ops, Arc::new(synthetic_sandbox()))?)
}

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let clock = Arc::new(SystemClock);

    let full_path = dir.path().join("full.ndjson");
    let mut full = Journal::create(&full_path, clock.clone())?;
    let reference = engine()?.run(&mut full, None)?;

    let text = std::fs::read_to_string(&full_path)?;
    let cut = text.len() * 3 / 5;
    let torn = dir.path().join("torn.ndjson");
    std::fs::write(&torn, &text[..cut])?;
    println!("journal cut at byte {cut} of {}", text.len());

    let mut journal = Journal::open(&torn, clock)?;
    println!("{} intact events survived", journal.events().len());
    let resumed = engine()?.resume(&mut journal, false)?;

    for e in journal.events() {
        if let EventBody::NodeAbandoned { node } = &e.body {
            println!("node {node} was mid-flight and is rebuilt under the same id");
        }
    }
    println!("uninterrupted best {:?}, resumed best {:?}", reference.best, resumed.best);
    println!("uninterrupted edge {:?}", reference.primary_edge);
    println!("resumed edge       {:?}", resumed.primary_edge);
    anyhow::ensure!(reference.best == resumed.best, "resume diverged");
    Ok(())
}
