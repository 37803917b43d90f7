//! Append-only run journal and deterministic replay.
//!
//! The journal is `<run_dir>/journal.ndjson`: one JSON object per line,
//! UTF-8, each with the fields
//!
//! | field       | meaning                                             |
//! |-------------|-----------------------------------------------------|
//! | `seq`       | 0-based, gap-free event number                      |
//! | `timestamp` | RFC 3339 UTC; informational, ignored by equality    |
//! | `kind`      | event kind in snake_case (see [`EventBody`])        |
//! | `payload`   | kind-specific object                                |
//!
//! `node_finalized` carries the full node snapshot, so the graph can be
//! rebuilt from the journal alone.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::engine::TriggerEvent;
use crate::model::{Action, EvolutionGraph, GraphError, MetricMap, MetricSpecs, Node, NodeId, TokenUsage};
use crate::operators::OperatorKind;
use crate::sandbox::{ExitStatus, RunMode};

pub const JOURNAL_FILE: &str = "journal.ndjson";

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal io at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("journal {0} already exists and is not empty")]
    AlreadyExists(PathBuf),
    #[error("journal line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayError {
    #[error("journal does not begin with run_started")]
    MissingRunStarted,
    #[error("sequence gap: expected seq {0}")]
    SequenceGap(u64),
    #[error("event {seq}: references unknown node {node}")]
    UnknownNode { seq: u64, node: NodeId },
    #[error("event {seq}: {message}")]
    Malformed { seq: u64, message: String },
    #[error("event {seq}: {source}")]
    Graph { seq: u64, source: GraphError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStarted {
    pub run_id: String,
    pub config_hash: String,
    pub metric_specs: MetricSpecs,
    #[serde(default)]
    pub trigger: Option<TriggerEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorCall {
    pub node: NodeId,
    pub operator: OperatorKind,
    pub model: String,
    pub fingerprint: String,
    pub usage: TokenUsage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxNodes,
    WallClock,
    TokenBudget,
    NoExpandableNode,
    PlanExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub best: Option<NodeId>,
    pub best_metrics: MetricMap,
    pub primary_edge: Vec<NodeId>,
    pub stop_reason: StopReason,
    pub node_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    RunStarted(RunStarted),
    TriggerFired {
        trigger: TriggerEvent,
    },
    NodeCreated {
        id: NodeId,
        primary_parent: Option<NodeId>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        merge_parents: Vec<NodeId>,
        action: Action,
    },
    OperatorCall(OperatorCall),
    SandboxRun {
        node: NodeId,
        attempt: u32,
        mode: RunMode,
        exit: ExitStatus,
        wall_seconds: f64,
        metrics: MetricMap,
    },
    MergePerformed {
        node: NodeId,
        parents: Vec<NodeId>,
    },
    NodeFinalized {
        node: Box<Node>,
    },
    BranchTerminated {
        node: NodeId,
    },
    NodeAbandoned {
        node: NodeId,
    },
    Warning {
        #[serde(default)]
        node: Option<NodeId>,
        message: String,
    },
    RunFinished(RunOutcome),
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::RunStarted(_) => "run_started",
            EventBody::TriggerFired { .. } => "trigger_fired",
            EventBody::NodeCreated { .. } => "node_created",
            EventBody::OperatorCall(_) => "operator_call",
            EventBody::SandboxRun { .. } => "sandbox_run",
            EventBody::MergePerformed { .. } => "merge_performed",
            EventBody::NodeFinalized { .. } => "node_finalized",
            EventBody::BranchTerminated { .. } => "branch_terminated",
            EventBody::NodeAbandoned { .. } => "node_abandoned",
            EventBody::Warning { .. } => "warning",
            EventBody::RunFinished(_) => "run_finished",
        }
    }
}

/// One journal line. Equality ignores the timestamp.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JournalEvent {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    #[serde(flatten)]
    pub body: EventBody,
}

impl PartialEq for JournalEvent {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq && self.body == other.body
    }
}

/// Single writer for a run's journal. Every appended event is kept in memory
/// and, when backed by a file, written and flushed before `append` returns.
pub struct Journal {
    events: Vec<JournalEvent>,
    file: Option<(PathBuf, File)>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Journal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Journal")
            .field("events", &self.events.len())
            .field("path", &self.file.as_ref().map(|(p, _)| p))
            .finish()
    }
}

impl Journal {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self { events: Vec::new(), file: None, clock }
    }

    /// Starts a new journal file. Refuses to clobber a non-empty one.
    pub fn create(path: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Result<Self, JournalError> {
        let path = path.into();
        if path.metadata().map(|m| m.len() > 0).unwrap_or(false) {
            return Err(JournalError::AlreadyExists(path));
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|source| JournalError::Io { path: dir.to_path_buf(), source })?;
        }
        let file = File::create(&path).map_err(|source| JournalError::Io { path: path.clone(), source })?;
        Ok(Self { events: Vec::new(), file: Some((path, file)), clock })
    }

    /// Opens an existing journal for appending. A torn final line (no
    /// trailing newline, unparsable) is cut off before appending resumes.
    pub fn open(path: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Result<Self, JournalError> {
        let path = path.into();
        let (events, valid_len) = read_events(&path)?;
        let file = OpenOptions::new()
            .write(true)
            .open(&path)
            .map_err(|source| JournalError::Io { path: path.clone(), source })?;
        file.set_len(valid_len).map_err(|source| JournalError::Io { path: path.clone(), source })?;
        let mut file = file;
        use std::io::Seek;
        file.seek(std::io::SeekFrom::End(0)).map_err(|source| JournalError::Io { path: path.clone(), source })?;
        Ok(Self { events, file: Some((path, file)), clock })
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn events(&self) -> &[JournalEvent] {
        &self.events
    }

    pub fn next_seq(&self) -> u64 {
        self.events.len() as u64
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn append(&mut self, body: EventBody) -> Result<&JournalEvent, JournalError> {
        let event = JournalEvent { seq: self.next_seq(), timestamp: self.clock.now(), body };
        if let Some((path, file)) = &mut self.file {
            let mut line = serde_json::to_string(&event).expect("journal events serialize");
            line.push('\n');
            let durable = matches!(event.body, EventBody::NodeFinalized { .. } | EventBody::RunFinished(_));
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .and_then(|_| if durable { file.sync_data() } else { Ok(()) })
                .map_err(|source| JournalError::Io { path: path.clone(), source })?;
        }
        self.events.push(event);
        Ok(self.events.last().expect("just pushed"))
    }
}

/// Reads every complete event of a journal file.
pub fn read_journal(path: &Path) -> Result<Vec<JournalEvent>, JournalError> {
    read_events(path).map(|(events, _)| events)
}

fn read_events(path: &Path) -> Result<(Vec<JournalEvent>, u64), JournalError> {
    let io = |source| JournalError::Io { path: path.to_path_buf(), source };
    let mut reader = BufReader::new(File::open(path).map_err(io)?);
    let mut events = Vec::new();
    let mut valid_len = 0u64;
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(io)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        // An unterminated line was never acknowledged by `append`.
        if !buf.ends_with('\n') {
            break;
        }
        let text = buf.trim();
        if text.is_empty() {
            valid_len += n as u64;
            continue;
        }
        match serde_json::from_str::<JournalEvent>(text) {
            Ok(ev) => {
                events.push(ev);
                valid_len += n as u64;
            }
            Err(e) => return Err(JournalError::Parse { line: line_no, message: e.to_string() }),
        }
    }
    Ok((events, valid_len))
}

pub fn write_events(path: &Path, events: &[JournalEvent]) -> std::io::Result<()> {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("journal events serialize"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

/// A node whose `node_created` event has no matching finalization yet.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingNode {
    pub id: NodeId,
    pub primary_parent: Option<NodeId>,
    pub merge_parents: Vec<NodeId>,
    pub action: Action,
}

/// Everything recoverable from a journal.
#[derive(Debug, Clone)]
pub struct JournalState {
    pub started: RunStarted,
    pub graph: EvolutionGraph,
    pub pending: Option<PendingNode>,
    pub terminated: BTreeSet<NodeId>,
    pub merges: Vec<(NodeId, Vec<NodeId>)>,
    pub calls: Vec<OperatorCall>,
    pub trigger_fired: bool,
    pub abandoned: Vec<NodeId>,
    pub warnings: Vec<String>,
    pub finished: Option<RunOutcome>,
    pub first_timestamp: DateTime<Utc>,
    pub last_timestamp: DateTime<Utc>,
}

impl JournalState {
    pub fn replay(events: &[JournalEvent]) -> Result<Self, ReplayError> {
        let first = events.first().ok_or(ReplayError::MissingRunStarted)?;
        let EventBody::RunStarted(started) = &first.body else {
            return Err(ReplayError::MissingRunStarted);
        };
        if first.seq != 0 {
            return Err(ReplayError::SequenceGap(0));
        }
        let mut st = JournalState {
            started: started.clone(),
            graph: EvolutionGraph::new(started.run_id.clone()),
            pending: None,
            terminated: BTreeSet::new(),
            merges: Vec::new(),
            calls: Vec::new(),
            trigger_fired: false,
            abandoned: Vec::new(),
            warnings: Vec::new(),
            finished: None,
            first_timestamp: first.timestamp,
            last_timestamp: first.timestamp,
        };
        for (i, ev) in events.iter().enumerate().skip(1) {
            if ev.seq != i as u64 {
                return Err(ReplayError::SequenceGap(i as u64));
            }
            st.apply(ev)?;
        }
        Ok(st)
    }

    fn expect_pending(&self, seq: u64, node: NodeId) -> Result<(), ReplayError> {
        match &self.pending {
            Some(p) if p.id == node => Ok(()),
            _ => Err(ReplayError::UnknownNode { seq, node }),
        }
    }

    fn apply(&mut self, ev: &JournalEvent) -> Result<(), ReplayError> {
        let seq = ev.seq;
        let malformed = |message: &str| ReplayError::Malformed { seq, message: message.to_string() };
        if self.finished.is_some() {
            return Err(malformed("event after run_finished"));
        }
        self.last_timestamp = ev.timestamp;
        match &ev.body {
            EventBody::RunStarted(_) => return Err(malformed("duplicate run_started")),
            EventBody::TriggerFired { .. } => self.trigger_fired = true,
            EventBody::NodeCreated { id, primary_parent, merge_parents, action } => {
                if self.pending.is_some() {
                    return Err(malformed("node created while another node is in progress"));
                }
                if *id != self.graph.next_id() {
                    return Err(malformed(&format!("node {id} created out of order")));
                }
                for p in primary_parent.iter().chain(merge_parents) {
                    if !self.graph.contains(*p) {
                        return Err(ReplayError::UnknownNode { seq, node: *p });
                    }
                }
                self.pending = Some(PendingNode {
                    id: *id,
                    primary_parent: *primary_parent,
                    merge_parents: merge_parents.clone(),
                    action: *action,
                });
            }
            EventBody::OperatorCall(call) => {
                self.expect_pending(seq, call.node)?;
                self.calls.push(call.clone());
            }
            EventBody::SandboxRun { node, .. } => self.expect_pending(seq, *node)?,
            EventBody::MergePerformed { node, parents } => {
                self.expect_pending(seq, *node)?;
                if let Some(p) = parents.iter().find(|p| !self.graph.contains(**p)) {
                    return Err(ReplayError::UnknownNode { seq, node: *p });
                }
                self.merges.push((*node, parents.clone()));
            }
            EventBody::NodeFinalized { node } => {
                self.expect_pending(seq, node.id)?;
                let pending = self.pending.take().expect("checked");
                if pending.primary_parent != node.primary_parent || pending.action != node.action {
                    return Err(malformed("finalized node disagrees with its creation event"));
                }
                self.graph.add_node((**node).clone()).map_err(|source| ReplayError::Graph { seq, source })?;
            }
            EventBody::BranchTerminated { node } => {
                if !self.graph.contains(*node) {
                    return Err(ReplayError::UnknownNode { seq, node: *node });
                }
                self.terminated.insert(*node);
            }
            EventBody::NodeAbandoned { node } => {
                self.expect_pending(seq, *node)?;
                self.pending = None;
                self.abandoned.push(*node);
            }
            EventBody::Warning { message, .. } => self.warnings.push(message.clone()),
            EventBody::RunFinished(outcome) => self.finished = Some(outcome.clone()),
        }
        Ok(())
    }

    /// Token usage of every recorded operator call, including calls made on
    /// behalf of nodes that never finalized.
    pub fn total_usage(&self) -> TokenUsage {
        self.calls.iter().map(|c| c.usage).sum()
    }
}

/// Rebuilds the evolution graph from a journal.
pub fn replay_journal(events: &[JournalEvent]) -> Result<EvolutionGraph, ReplayError> {
    JournalState::replay(events).map(|s| s.graph)
}
