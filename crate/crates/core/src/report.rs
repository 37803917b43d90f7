//! Tree rendering and run reports, both computed from the journal alone.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::engine::metric_line;
use crate::gateway::{format_tokens, LedgerReport, TokenLedger};
use crate::journal::{JournalEvent, JournalState, ReplayError, StopReason};
use crate::model::{Action, EvolutionGraph, MetricMap, MetricSpecs, NodeId, NodeStatus, TokenUsage};
use crate::strategy::{self, StrategyError};

pub const BEST_MARKER: &str = "  <- best";
pub const INVALID_MARKER: &str = "(invalid)";

/// Box-drawing view of the graph, children in id order. Nodes on the
/// primary edge carry [`BEST_MARKER`]; buggy nodes end with
/// [`INVALID_MARKER`].
pub fn render_tree(graph: &EvolutionGraph, specs: &MetricSpecs) -> String {
    let Some(root) = graph.root() else {
        return String::new();
    };
    let best_branch = strategy::primary_edge(graph, specs).unwrap_or_default();
    let mut out = format!("Root {root}");
    if let Some(n) = graph.get(root) {
        if !n.metrics.is_empty() {
            let _ = write!(out, ": {}", metric_line(specs, n));
        }
    }
    if best_branch.last() == Some(&root) {
        out.push_str(BEST_MARKER);
    }
    out.push('\n');
    render_children(graph, specs, root, "", &best_branch, &mut out);
    out
}

fn render_children(
    graph: &EvolutionGraph,
    specs: &MetricSpecs,
    id: NodeId,
    prefix: &str,
    best: &[NodeId],
    out: &mut String,
) {
    let mut kids = graph.children(id).to_vec();
    kids.sort();
    for (i, kid) in kids.iter().enumerate() {
        let last = i + 1 == kids.len();
        let Some(n) = graph.get(*kid) else { continue };
        let _ = write!(out, "{prefix}{}{}: {}", if last { "└── " } else { "├── " }, n.id, metric_line(specs, n));
        if n.action == Action::Merge {
            let ps: Vec<String> = n.merge_parents.iter().map(ToString::to_string).collect();
            let _ = write!(out, " [merge of {}]", ps.join(", "));
        }
        if n.status == NodeStatus::Buggy {
            let _ = write!(out, " {INVALID_MARKER}");
        } else if best.contains(kid) {
            out.push_str(BEST_MARKER);
        }
        out.push('\n');
        let child_prefix = format!("{prefix}{}", if last { "    " } else { "│   " });
        render_children(graph, specs, *kid, &child_prefix, best, out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Ok,
    NoValidNode,
    /// The journal has no `run_finished` event yet.
    InProgress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRow {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub action: Action,
    pub status: NodeStatus,
    pub metrics: MetricMap,
    pub debug_attempts: u32,
    pub tokens: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub status: ReportStatus,
    pub stop_reason: Option<StopReason>,
    pub best: Option<NodeId>,
    pub best_metrics: MetricMap,
    pub primary_edge: Vec<NodeId>,
    pub nodes: Vec<NodeRow>,
    pub tokens: LedgerReport,
    pub wall_seconds: f64,
}

impl Report {
    /// `0 → 1 → 6 → 10`.
    pub fn primary_edge_text(&self) -> String {
        self.primary_edge.iter().map(ToString::to_string).collect::<Vec<_>>().join(" → ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self, specs: &MetricSpecs) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Run: {}", self.run_id);
        let status = match self.status {
            ReportStatus::Ok => "ok",
            ReportStatus::NoValidNode => "no valid node",
            ReportStatus::InProgress => "in progress",
        };
        let _ = writeln!(s, "Status: {status}");
        if let Some(r) = self.stop_reason {
            let _ = writeln!(
                s,
                "Stop reason: {}",
                serde_json::to_value(r).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
            );
        }
        match self.best {
            Some(b) => {
                let m: Vec<String> = specs
                    .display_order()
                    .into_iter()
                    .filter_map(|n| self.best_metrics.get(n).map(|v| format!("{n}={v:.4}")))
                    .collect();
                let _ = writeln!(s, "Best node: {b} ({})", m.join(", "));
                let _ = writeln!(s, "Primary edge: {}", self.primary_edge_text());
            }
            None => {
                let _ = writeln!(s, "Best node: none");
            }
        }
        let t = self.tokens.totals;
        let _ = writeln!(
            s,
            "Tokens: {} input, {} output, {} total ({} calls)",
            format_tokens(t.input_tokens),
            format_tokens(t.output_tokens),
            format_tokens(t.total()),
            self.tokens.calls
        );
        let _ = writeln!(s, "Wall time: {:.1}s", self.wall_seconds);
        let _ = writeln!(s);
        let names = specs.display_order();
        let _ = write!(s, "{:>4}  {:>6}  {:<8}  {:<6}", "node", "parent", "action", "status");
        for n in &names {
            let _ = write!(s, "  {n:>9}");
        }
        let _ = writeln!(s, "  {:>5}  {:>8}", "debug", "tokens");
        for r in &self.nodes {
            let parent = r.parent.map_or("-".to_string(), |p| p.to_string());
            let status = match r.status {
                NodeStatus::Valid => "valid",
                NodeStatus::Buggy => "buggy",
                NodeStatus::Draft => "draft",
            };
            let _ = write!(s, "{:>4}  {:>6}  {:<8}  {:<6}", r.id.to_string(), parent, r.action.to_string(), status);
            for n in &names {
                let v = r.metrics.get(*n).map_or("---".to_string(), |v| format!("{v:.4}"));
                let _ = write!(s, "  {v:>9}");
            }
            let _ = writeln!(s, "  {:>5}  {:>8}", r.debug_attempts, format_tokens(r.tokens.total()));
        }
        s
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

/// Builds the report of the run recorded in `events`.
pub fn build_report(events: &[JournalEvent]) -> Result<Report, ReportError> {
    let st = JournalState::replay(events)?;
    let specs = &st.started.metric_specs;
    let graph = &st.graph;
    let (best, primary_edge) = match strategy::best_node(graph, specs) {
        Ok(b) => (Some(b), graph.lineage(b).map_err(StrategyError::from)?),
        Err(StrategyError::NoValidNode) => (None, Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let status = match (&st.finished, best) {
        (None, _) => ReportStatus::InProgress,
        (Some(_), None) => ReportStatus::NoValidNode,
        (Some(_), Some(_)) => ReportStatus::Ok,
    };
    let nodes = graph
        .nodes()
        .map(|n| NodeRow {
            id: n.id,
            parent: n.primary_parent,
            action: n.action,
            status: n.status,
            metrics: n.metrics.clone(),
            debug_attempts: n.debug_attempts,
            tokens: n.tokens,
        })
        .collect();
    let wall = (st.last_timestamp - st.first_timestamp).num_milliseconds() as f64 / 1000.0;
    Ok(Report {
        run_id: st.started.run_id.clone(),
        status,
        stop_reason: st.finished.as_ref().map(|f| f.stop_reason),
        best,
        best_metrics: best.and_then(|b| graph.get(b)).map(|n| n.metrics.clone()).unwrap_or_default(),
        primary_edge,
        nodes,
        tokens: TokenLedger::from_journal(events).report(),
        wall_seconds: wall.max(0.0),
    })
}

/// Tree rendering of the run recorded in `events`.
pub fn tree_from_journal(events: &[JournalEvent]) -> Result<String, ReplayError> {
    let st = JournalState::replay(events)?;
    Ok(render_tree(&st.graph, &st.started.metric_specs))
}
