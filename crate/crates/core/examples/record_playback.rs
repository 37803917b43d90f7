//! Records every model exchange of a run, turns the recordings into a
//! playback table, and reruns the search offline from that table.
//!
//! ```bash
//! cargo run --example record_playback
//! ```

use std::sync::Arc;

use sepdd::clock::SystemClock;
use sepdd::fixtures::synthetic::{synthetic_backend, synthetic_sandbox, FaultPlan};
use sepdd::operators::{
    build_playback_table, ModelRouting, Operators, PlaybackBackend, RecordingBackend, SamplingParams,
};
use sepdd::report::build_report;
use sepdd::{CompletionBackend, EngineConfig, Evolution, Journal, RunBudget, TaskSpec};

fn run(backend: Arc<dyn CompletionBackend>) -> anyhow::Result<Journal> {
    let task = TaskSpec {
        description: "Detect weld seam defects.".into(),
        data_description: "Synthetic seam crops.".into(),
        requirements: "Report mAP50 and mAP50-95.".into(),
    };
    let mut cfg = EngineConfig::new("record-playback", task);
    cfg.budget = RunBudget { max_nodes: 8, max_debug_depth: 2, wall_clock_limit_secs: None };
    let ops = Operators::new(backend, ModelRouting::default(), SamplingParams::default());
    let mut journal = Journal::in_memory(Arc::new(SystemClock));
    Evolution::new(cfg, ops, Arc::new(synthetic_sandbox()))?.run(&mut journal, None)?;
    Ok(journal)
}

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let recordings = dir.path().join("recordings");
    let live = Arc::new(synthetic_backend(5, FaultPlan::random(5, 0.25)));
    let recorded = run(Arc::new(RecordingBackend::new(live, &recordings)?))?;

    let table = dir.path().join("table");
    let entries = build_playback_table(&recordings, &table)?;
    println!("{entries} distinct exchanges in the playback table");

    let replayed = run(Arc::new(PlaybackBackend::load(&table)?))?;
    let (a, b) = (build_report(recorded.events())?, build_report(replayed.events())?);
    println!("recorded: best {:?}, edge {}, tokens {}", a.best, a.primary_edge_text(), a.tokens.totals.total());
    println!("playback: best {:?}, edge {}, tokens {}", b.best, b.primary_edge_text(), b.tokens.totals.total());
    anyhow::ensure!(a.best == b.best && a.primary_edge == b.primary_edge, "playback diverged");
    Ok(())
}
