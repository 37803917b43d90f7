//! Domain types shared by every part of the search: nodes, metric specs,
//! token usage and the evolution graph.

mod graph;

pub use graph::{EvolutionGraph, GraphError};

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::sandbox::ExecOutcome;

/// Metric name to value, ordered by name so serialization is stable.
pub type MetricMap = BTreeMap<String, f64>;

/// Identifier of a node, assigned in creation order. The root is always 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn next(self) -> NodeId {
        NodeId(self.0 + 1)
    }

    pub fn is_root(self) -> bool {
        self == Self::ROOT
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for NodeId {
    fn from(v: u32) -> Self {
        NodeId(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Draft,
    Valid,
    Buggy,
}

/// How a node came to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Root,
    /// First-generation solution written from the task description alone.
    Draft,
    Improve,
    /// Repair attempt spawned from a buggy parent.
    Debug,
    Merge,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Action::Root => "root",
            Action::Draft => "draft",
            Action::Improve => "improve",
            Action::Debug => "debug",
            Action::Merge => "merge",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl TokenUsage {
    pub const ZERO: TokenUsage = TokenUsage { input_tokens: 0, output_tokens: 0 };

    pub fn new(input_tokens: u64, output_tokens: u64) -> Self {
        Self { input_tokens, output_tokens }
    }

    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

impl Add for TokenUsage {
    type Output = TokenUsage;

    fn add(self, rhs: TokenUsage) -> TokenUsage {
        TokenUsage {
            input_tokens: self.input_tokens + rhs.input_tokens,
            output_tokens: self.output_tokens + rhs.output_tokens,
        }
    }
}

impl AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: TokenUsage) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for TokenUsage {
    fn sum<I: Iterator<Item = TokenUsage>>(iter: I) -> TokenUsage {
        iter.fold(TokenUsage::ZERO, Add::add)
    }
}

/// One explored candidate pipeline.
///
/// Equality ignores `created_at`: timestamps are informational and two
/// replays of the same journal must compare equal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub primary_parent: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub merge_parents: Vec<NodeId>,
    pub action: Action,
    pub suggestions: String,
    pub code: String,
    pub exec: Option<ExecOutcome>,
    pub analysis: String,
    pub metrics: MetricMap,
    pub status: NodeStatus,
    pub debug_attempts: u32,
    pub tokens: TokenUsage,
    pub created_at: DateTime<Utc>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.primary_parent == other.primary_parent
            && self.merge_parents == other.merge_parents
            && self.action == other.action
            && self.suggestions == other.suggestions
            && self.code == other.code
            && self.exec == other.exec
            && self.analysis == other.analysis
            && self.metrics == other.metrics
            && self.status == other.status
            && self.debug_attempts == other.debug_attempts
            && self.tokens == other.tokens
    }
}

impl Node {
    /// A fresh node in `Draft` status with empty content.
    pub fn draft(id: NodeId, primary_parent: Option<NodeId>, action: Action, created_at: DateTime<Utc>) -> Self {
        Node {
            id,
            primary_parent,
            merge_parents: Vec::new(),
            action,
            suggestions: String::new(),
            code: String::new(),
            exec: None,
            analysis: String::new(),
            metrics: MetricMap::new(),
            status: NodeStatus::Draft,
            debug_attempts: 0,
            tokens: TokenUsage::ZERO,
            created_at,
        }
    }

    /// The root node. Without a baseline it carries no code and no metrics and
    /// is never ranked; with one it stands for a predefined starting pipeline.
    pub fn root(baseline: Option<&Baseline>, created_at: DateTime<Utc>) -> Self {
        let mut node = Node::draft(NodeId::ROOT, None, Action::Root, created_at);
        if let Some(b) = baseline {
            node.code = b.code.clone();
            node.metrics = b.metrics.clone();
            node.analysis = "baseline configuration".to_string();
        }
        node.status = NodeStatus::Valid;
        node
    }

    pub fn is_finalized(&self) -> bool {
        self.status != NodeStatus::Draft
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Checks the structural invariants a finalized node must satisfy.
    pub fn check_invariants(&self, primary_metric: &str, max_debug_depth: u32) -> Result<(), String> {
        if self.id.is_root() != self.primary_parent.is_none() {
            return Err(format!("node {}: only the root may lack a primary parent", self.id));
        }
        if !self.merge_parents.is_empty() {
            if self.merge_parents.len() < 2 {
                return Err(format!("node {}: merge with fewer than two parents", self.id));
            }
            match self.primary_parent {
                Some(p) if self.merge_parents.contains(&p) => {}
                _ => return Err(format!("node {}: merge parents exclude the primary parent", self.id)),
            }
        }
        if self.debug_attempts > max_debug_depth {
            return Err(format!(
                "node {}: {} debug attempts exceed depth {}",
                self.id, self.debug_attempts, max_debug_depth
            ));
        }
        match self.status {
            NodeStatus::Draft => Err(format!("node {} is not finalized", self.id)),
            NodeStatus::Valid if self.action != Action::Root && !self.metrics.contains_key(primary_metric) => {
                Err(format!("node {}: valid without primary metric {primary_metric}", self.id))
            }
            NodeStatus::Buggy if !self.metrics.is_empty() => {
                Err(format!("node {}: buggy node carries metrics", self.id))
            }
            _ => Ok(()),
        }
    }
}

/// A predefined configuration the root starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub code: String,
    #[serde(default)]
    pub metrics: MetricMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricRole {
    Primary,
    Tiebreak,
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    #[serde(default = "default_true")]
    pub higher_is_better: bool,
    pub role: MetricRole,
}

fn default_true() -> bool {
    true
}

impl MetricSpec {
    pub fn new(name: impl Into<String>, higher_is_better: bool, role: MetricRole) -> Self {
        Self { name: name.into(), higher_is_better, role }
    }
}

/// The metric configuration of a run. Exactly one spec is `Primary`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MetricSpec>", into = "Vec<MetricSpec>")]
pub struct MetricSpecs(Vec<MetricSpec>);

impl MetricSpecs {
    pub fn new(specs: Vec<MetricSpec>) -> Result<Self, String> {
        let primaries = specs.iter().filter(|s| s.role == MetricRole::Primary).count();
        if primaries != 1 {
            return Err(format!("expected exactly one primary metric, found {primaries}"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &specs {
            if !seen.insert(s.name.as_str()) {
                return Err(format!("metric {} declared twice", s.name));
            }
        }
        Ok(Self(specs))
    }

    pub fn primary(&self) -> &MetricSpec {
        self.0.iter().find(|s| s.role == MetricRole::Primary).expect("validated on construction")
    }

    pub fn tiebreaks(&self) -> impl Iterator<Item = &MetricSpec> {
        self.0.iter().filter(|s| s.role == MetricRole::Tiebreak)
    }

    pub fn iter(&self) -> impl Iterator<Item = &MetricSpec> {
        self.0.iter()
    }

    /// Metric names in tree/report display order: secondary metrics first,
    /// the primary metric last.
    pub fn display_order(&self) -> Vec<&str> {
        let mut names: Vec<&str> =
            self.0.iter().filter(|s| s.role != MetricRole::Primary).map(|s| s.name.as_str()).collect();
        names.push(self.primary().name.as_str());
        names
    }

    /// Orders two nodes best-first: primary metric, then tiebreaks in
    /// declaration order, then lower id. A missing value sorts after any
    /// present value.
    pub fn compare(&self, a: &Node, b: &Node) -> Ordering {
        let by_metric = |spec: &MetricSpec| -> Ordering {
            match (a.metric(&spec.name), b.metric(&spec.name)) {
                (Some(x), Some(y)) => {
                    if spec.higher_is_better {
                        y.total_cmp(&x)
                    } else {
                        x.total_cmp(&y)
                    }
                }
                (Some(_), None) => Ordering::Less,
                (None, Some(_)) => Ordering::Greater,
                (None, None) => Ordering::Equal,
            }
        };
        std::iter::once(self.primary())
            .chain(self.tiebreaks())
            .map(by_metric)
            .find(|o| o.is_ne())
            .unwrap_or_else(|| a.id.cmp(&b.id))
    }

    /// True when `candidate` is strictly better than `incumbent` on the
    /// primary metric.
    pub fn improves(&self, candidate: f64, incumbent: f64) -> bool {
        if self.primary().higher_is_better {
            candidate > incumbent
        } else {
            candidate < incumbent
        }
    }
}

impl Default for MetricSpecs {
    /// mAP50 ranks, mAP50-95 breaks ties.
    fn default() -> Self {
        Self(vec![
            MetricSpec::new("mAP50", true, MetricRole::Primary),
            MetricSpec::new("mAP50-95", true, MetricRole::Tiebreak),
        ])
    }
}

impl TryFrom<Vec<MetricSpec>> for MetricSpecs {
    type Error = String;

    fn try_from(v: Vec<MetricSpec>) -> Result<Self, String> {
        MetricSpecs::new(v)
    }
}

impl From<MetricSpecs> for Vec<MetricSpec> {
    fn from(m: MetricSpecs) -> Self {
        m.0
    }
}
