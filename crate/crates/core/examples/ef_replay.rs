//! Replays the recorded EF industrial run end to end and prints its tree,
//! the winning lineage and the token ledger.
//!
//! ```bash
//! cargo run --example ef_replay
//! ```

use std::sync::Arc;

use sepdd::clock::SystemClock;
use sepdd::fixtures::ef::run_ef_replay;
use sepdd::report::build_report;
use sepdd::{Journal, MetricSpecs};

fn main() -> anyhow::Result<()> {
    let mut journal = Journal::in_memory(Arc::new(SystemClock));
    let outcome = run_ef_replay(&mut journal)?;
    let report = build_report(journal.events())?;

    print!("{}", report.to_text(&MetricSpecs::default()));
    println!();
    println!("stop reason: {:?}", outcome.stop_reason);
    println!("journal events: {}", journal.events().len());
    Ok(())
}
