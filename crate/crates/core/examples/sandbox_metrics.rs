//! Runs candidate programs in the process sandbox: a static check, a
//! debug-mode run, a full run, a timeout, and metrics read from stdout
//! through both the line protocol and a custom regex.
//!
//! ```bash
//! cargo run --example sandbox_metrics
//! ```

use sepdd::sandbox::{CommandTemplate, ExecLimits, MetricPattern, ProcessSandbox, Sandbox};
use sepdd::NodeId;

const GOOD: &str = r#"
if [ -n "$SEPDD_DEBUG" ]; then echo "debug pass on a tiny split"; fi
echo "epoch 30/30 all  mAP50: 0.8125"
echo "SEPDD_METRIC mAP50-95=0.5531"
"#;

const BROKEN: &str = "if then fi\n";

const SLOW: &str = "sleep 5\necho SEPDD_METRIC mAP50=0.9\n";

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let limits = ExecLimits { full_timeout_secs: 0.5, debug_timeout_secs: 2.0, ..Default::default() };
    let sandbox = ProcessSandbox::new(dir.path(), limits, CommandTemplate::parse("sh {file}"))
        .with_checker(CommandTemplate::parse("sh -n {file}"))
        .with_metric_patterns(vec![MetricPattern::new("mAP50", r"all\s+mAP50:\s*([0-9.]+)")?]);

    let v = sandbox.validate(NodeId(1), GOOD)?;
    println!(
        "good: syntax clean={}, debug run {}",
        v.syntax.ok,
        v.exec.as_ref().map(|e| e.exit.to_string()).unwrap_or_default()
    );
    let full = sandbox.execute(NodeId(1), GOOD)?;
    println!("good: full run {} in {:.3}s, metrics {:?}", full.exit, full.wall_seconds, full.metrics);

    let v = sandbox.validate(NodeId(2), BROKEN)?;
    println!("broken: syntax clean={}, debug run skipped={}", v.syntax.ok, v.exec.is_none());
    println!("  checker said: {}", v.syntax.summary().trim());

    let slow = sandbox.execute(NodeId(3), SLOW)?;
    println!("slow: {} after {:.2}s, metrics {:?}", slow.exit, slow.wall_seconds, slow.metrics);
    println!("workspaces under {}", dir.path().display());
    Ok(())
}
