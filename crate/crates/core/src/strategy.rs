//! Deterministic search policy: ranking, top-k parent selection, merge
//! candidates, branch termination and lineage extraction.
//!
//! All functions are pure over a graph snapshot.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Action, EvolutionGraph, GraphError, MetricSpecs, NodeId, NodeStatus};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StrategyError {
    #[error("no valid node to rank")]
    NoValidNode,
    #[error("no expandable node")]
    NoExpandableNode,
    #[error("need {needed} valid nodes for a merge, have {have}")]
    InsufficientCandidates { needed: usize, have: usize },
    #[error("merge candidates all come from one branch")]
    InsufficientDiversity,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    /// Width of the top-k pool parents are drawn from.
    pub k: usize,
    /// Successful expansions between merge actions.
    pub merge_period: usize,
    /// Number of parents fed to a merge.
    pub merge_arity: usize,
    pub merge_enabled: bool,
    /// Consecutive buggy nodes along a lineage that terminate the branch.
    pub faulty_streak_limit: usize,
    /// The root stays expandable until it has this many children.
    pub initial_drafts: usize,
    /// Give a buggy leaf one repair expansion before its branch can be
    /// terminated.
    pub repair_buggy: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            k: 3,
            merge_period: 5,
            merge_arity: 2,
            merge_enabled: true,
            faulty_streak_limit: 2,
            initial_drafts: 2,
            repair_buggy: true,
        }
    }
}

impl StrategyConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.k == 0 {
            return Err("strategy.k must be at least 1".into());
        }
        if self.merge_period == 0 {
            return Err("strategy.merge_period must be at least 1".into());
        }
        if self.merge_arity < 2 {
            return Err("strategy.merge_arity must be at least 2".into());
        }
        if self.faulty_streak_limit == 0 {
            return Err("strategy.faulty_streak_limit must be at least 1".into());
        }
        Ok(())
    }
}

/// What the next expansion step does.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action", content = "parents")]
pub enum Expansion {
    /// New child of the root.
    Draft,
    Improve(NodeId),
    /// Repair attempt on a buggy leaf.
    Debug(NodeId),
    /// Parents in rank order; the first becomes the primary parent.
    Merge(Vec<NodeId>),
}

impl Expansion {
    pub fn primary_parent(&self, root: NodeId) -> NodeId {
        match self {
            Expansion::Draft => root,
            Expansion::Improve(p) | Expansion::Debug(p) => *p,
            Expansion::Merge(ps) => ps[0],
        }
    }
}

fn rankable(graph: &EvolutionGraph, specs: &MetricSpecs, id: NodeId) -> bool {
    graph
        .get(id)
        .map(|n| n.status == NodeStatus::Valid && n.metrics.contains_key(&specs.primary().name))
        .unwrap_or(false)
}

/// Valid nodes best-first. Buggy nodes and a root without metrics never
/// appear.
pub fn rank_nodes(graph: &EvolutionGraph, specs: &MetricSpecs) -> Result<Vec<NodeId>, StrategyError> {
    let mut nodes: Vec<_> = graph.nodes().filter(|n| rankable(graph, specs, n.id)).collect();
    if nodes.is_empty() {
        return Err(StrategyError::NoValidNode);
    }
    nodes.sort_by(|a, b| specs.compare(a, b));
    Ok(nodes.into_iter().map(|n| n.id).collect())
}

pub fn best_node(graph: &EvolutionGraph, specs: &MetricSpecs) -> Result<NodeId, StrategyError> {
    rank_nodes(graph, specs).map(|r| r[0])
}

/// Root-to-best lineage along primary-parent links.
pub fn primary_edge(graph: &EvolutionGraph, specs: &MetricSpecs) -> Result<Vec<NodeId>, StrategyError> {
    let best = best_node(graph, specs)?;
    Ok(graph.lineage(best)?)
}

/// Number of consecutive buggy nodes ending at `id` along its lineage.
pub fn faulty_streak(graph: &EvolutionGraph, id: NodeId) -> Result<usize, StrategyError> {
    let mut streak = 0;
    let mut cur = Some(id);
    while let Some(c) = cur {
        let n = graph.node(c)?;
        if n.status != NodeStatus::Buggy {
            break;
        }
        streak += 1;
        cur = n.primary_parent;
    }
    Ok(streak)
}

/// True when `id` closes a run of `faulty_streak_limit` buggy nodes; with
/// the default limit of 2, a buggy node under a buggy parent.
pub fn should_terminate_branch(
    graph: &EvolutionGraph,
    config: &StrategyConfig,
    id: NodeId,
) -> Result<bool, StrategyError> {
    Ok(faulty_streak(graph, id)? >= config.faulty_streak_limit)
}

/// A node is excluded from expansion when it or any ancestor terminated
/// its branch.
pub fn is_excluded(graph: &EvolutionGraph, config: &StrategyConfig, id: NodeId) -> Result<bool, StrategyError> {
    for n in graph.lineage(id)? {
        if should_terminate_branch(graph, config, n)? {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Top-k parent selection: among the k best non-excluded valid nodes,
/// the one with the fewest children; ties go to the better-ranked node.
///
/// The root is returned while it has fewer than `initial_drafts` children,
/// and whenever no valid node exists yet.
pub fn select_parent(
    graph: &EvolutionGraph,
    config: &StrategyConfig,
    specs: &MetricSpecs,
) -> Result<NodeId, StrategyError> {
    let root = graph.root().ok_or(StrategyError::NoExpandableNode)?;
    if graph.child_count(root)? < config.initial_drafts {
        return Ok(root);
    }
    let ranked = match rank_nodes(graph, specs) {
        Ok(r) => r,
        Err(StrategyError::NoValidNode) => return Ok(root),
        Err(e) => return Err(e),
    };
    let mut pool = Vec::with_capacity(config.k);
    for id in ranked {
        if pool.len() == config.k {
            break;
        }
        if !is_excluded(graph, config, id)? {
            pool.push(id);
        }
    }
    let mut best: Option<(usize, NodeId)> = None;
    for id in pool {
        let c = graph.child_count(id)?;
        if best.is_none_or(|(bc, _)| c < bc) {
            best = Some((c, id));
        }
    }
    best.map(|(_, id)| id).ok_or(StrategyError::NoExpandableNode)
}

/// The top `merge_arity` valid nodes, provided they do not all share one
/// first-generation ancestor. When they do, the last slot goes to the best
/// node from another branch.
pub fn select_merge_parents(
    graph: &EvolutionGraph,
    config: &StrategyConfig,
    specs: &MetricSpecs,
) -> Result<Vec<NodeId>, StrategyError> {
    let ranked = match rank_nodes(graph, specs) {
        Ok(r) => r,
        Err(StrategyError::NoValidNode) => Vec::new(),
        Err(e) => return Err(e),
    };
    let arity = config.merge_arity;
    if ranked.len() < arity {
        return Err(StrategyError::InsufficientCandidates { needed: arity, have: ranked.len() });
    }
    let branches = ranked.iter().map(|&id| graph.branch_of(id)).collect::<Result<Vec<_>, _>>()?;
    let mut pick: Vec<NodeId> = ranked[..arity].to_vec();
    if branches[..arity].iter().all(|b| *b == branches[0]) {
        let other =
            (arity..ranked.len()).find(|&i| branches[i] != branches[0]).ok_or(StrategyError::InsufficientDiversity)?;
        pick[arity - 1] = ranked[other];
    }
    Ok(pick)
}

/// Whether enough valid non-merge expansions happened since the last merge.
pub fn merge_due(graph: &EvolutionGraph, config: &StrategyConfig) -> bool {
    if !config.merge_enabled {
        return false;
    }
    let last_merge = graph.nodes().filter(|n| n.action == Action::Merge).map(|n| n.id).last();
    let successes = graph
        .nodes()
        .filter(|n| Some(n.id) > last_merge)
        .filter(|n| !matches!(n.action, Action::Root | Action::Merge) && n.status == NodeStatus::Valid)
        .count();
    successes >= config.merge_period
}

/// Buggy leaves that may still receive a repair expansion, lowest id first.
pub fn repair_candidates(graph: &EvolutionGraph, config: &StrategyConfig) -> Result<Vec<NodeId>, StrategyError> {
    let mut out = Vec::new();
    if !config.repair_buggy {
        return Ok(out);
    }
    for n in graph.nodes() {
        if n.status == NodeStatus::Buggy && graph.children(n.id).is_empty() && !is_excluded(graph, config, n.id)? {
            out.push(n.id);
        }
    }
    Ok(out)
}

/// Picks the next expansion: pending root drafts first, then a due merge,
/// then buggy-leaf repair, then top-k improvement. A merge that cannot find
/// diverse candidates falls through to the next option.
pub fn plan_expansion(
    graph: &EvolutionGraph,
    config: &StrategyConfig,
    specs: &MetricSpecs,
) -> Result<Expansion, StrategyError> {
    let root = graph.root().ok_or(StrategyError::NoExpandableNode)?;
    if graph.child_count(root)? < config.initial_drafts {
        return Ok(Expansion::Draft);
    }
    if merge_due(graph, config) {
        if let Ok(parents) = select_merge_parents(graph, config, specs) {
            return Ok(Expansion::Merge(parents));
        }
    }
    if let Some(&id) = repair_candidates(graph, config)?.first() {
        return Ok(Expansion::Debug(id));
    }
    let parent = select_parent(graph, config, specs)?;
    Ok(if parent == root { Expansion::Draft } else { Expansion::Improve(parent) })
}
