//! The outer evolution cycle: expand the graph node by node until a budget
//! is met, journaling everything so a run can be resumed after a crash.

pub mod triggers;
pub mod workflow;

pub use triggers::{
    evaluate_triggers, IndicatorFile, IndicatorState, Observed, TriggerError, TriggerEvent, TriggerKind,
};
pub use workflow::{run_node_workflow, NodeResult, WorkflowDeps};

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::journal::{EventBody, Journal, JournalError, JournalState, ReplayError, RunOutcome, RunStarted, StopReason};
use crate::model::{Baseline, EvolutionGraph, GraphError, MetricSpecs, Node, NodeId, NodeStatus};
use crate::operators::{JournalSummary, OperatorContext, Operators};
use crate::sandbox::Sandbox;
use crate::strategy::{self, Expansion, StrategyConfig, StrategyError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("journal replay failed: {0}")]
    Replay(#[from] ReplayError),
    #[error("config hash {found} does not match the journal's {expected}; pass the override flag to resume anyway")]
    ConfigMismatch { expected: String, found: String },
    #[error("invalid expansion plan at node {node}: {reason}")]
    InvalidPlan { node: NodeId, reason: String },
    #[error("journal already holds a run; use resume")]
    AlreadyStarted,
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunBudget {
    /// Expansions beyond the root.
    pub max_nodes: usize,
    pub max_debug_depth: u32,
    pub wall_clock_limit_secs: Option<f64>,
}

fn default_debug_depth() -> u32 {
    3
}

impl Default for RunBudget {
    fn default() -> Self {
        Self { max_nodes: 18, max_debug_depth: default_debug_depth(), wall_clock_limit_secs: None }
    }
}

impl RunBudget {
    pub fn check(&self) -> Result<(), String> {
        if self.max_nodes == 0 {
            return Err("budget.max_nodes must be at least 1".into());
        }
        if self.max_debug_depth == 0 {
            return Err("budget.max_debug_depth must be at least 1".into());
        }
        if self.wall_clock_limit_secs.is_some_and(|w| w.is_nan() || w <= 0.0) {
            return Err("budget.wall_clock_limit_secs must be positive".into());
        }
        Ok(())
    }
}

/// How the next expansion is chosen.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "plan")]
pub enum ExpansionPolicy {
    /// [`strategy::plan_expansion`].
    #[default]
    TopK,
    /// A fixed expansion per node id, checked against the graph before use.
    /// The run stops when the plan has no entry for the next id.
    Scripted(BTreeMap<NodeId, Expansion>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub description: String,
    #[serde(default)]
    pub data_description: String,
    pub requirements: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub run_id: String,
    pub task: TaskSpec,
    pub metric_specs: MetricSpecs,
    pub strategy: StrategyConfig,
    pub budget: RunBudget,
    pub policy: ExpansionPolicy,
    pub baseline: Option<Baseline>,
    /// Other-solution summaries shown to the Idea Generator.
    pub summary_limit: usize,
}

impl EngineConfig {
    pub fn new(run_id: impl Into<String>, task: TaskSpec) -> Self {
        Self {
            run_id: run_id.into(),
            task,
            metric_specs: MetricSpecs::default(),
            strategy: StrategyConfig::default(),
            budget: RunBudget::default(),
            policy: ExpansionPolicy::TopK,
            baseline: None,
            summary_limit: 5,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        self.strategy.check()?;
        self.budget.check()?;
        if self.task.description.trim().is_empty() || self.task.requirements.trim().is_empty() {
            return Err("task description and requirements must be non-empty".into());
        }
        Ok(())
    }

    /// Hash over everything that shapes the search. The budget is left out so
    /// a run can be resumed with a larger one.
    pub fn config_hash(&self) -> String {
        let v = serde_json::json!({
            "task": self.task,
            "metric_specs": self.metric_specs,
            "strategy": self.strategy,
            "max_debug_depth": self.budget.max_debug_depth,
            "policy": self.policy,
            "baseline": self.baseline,
            "summary_limit": self.summary_limit,
        });
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

/// `mAP50-95=0.3069, mAP50=0.4954`: display order, four decimals, `---`
/// for a missing value.
pub fn metric_line(specs: &MetricSpecs, node: &Node) -> String {
    specs
        .display_order()
        .into_iter()
        .map(|name| match node.metric(name) {
            Some(v) => format!("{name}={v:.4}"),
            None => format!("{name}=---"),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Summaries of the best valid nodes other than `exclude`, best first.
pub fn journal_summaries(
    graph: &EvolutionGraph,
    specs: &MetricSpecs,
    exclude: NodeId,
    limit: usize,
) -> Vec<JournalSummary> {
    let ranked = strategy::rank_nodes(graph, specs).unwrap_or_default();
    ranked
        .into_iter()
        .filter(|id| *id != exclude)
        .take(limit)
        .filter_map(|id| graph.get(id))
        .map(|n| {
            let titles: Vec<&str> = n.suggestions.lines().take(3).map(str::trim).collect();
            let failed = graph
                .children(n.id)
                .iter()
                .filter_map(|c| graph.get(*c))
                .filter(|c| c.status == NodeStatus::Buggy)
                .count();
            let insight = n
                .analysis
                .lines()
                .map(str::trim)
                .find(|l| !l.is_empty() && !l.to_ascii_uppercase().starts_with("VERDICT"))
                .unwrap_or("no analysis recorded");
            JournalSummary {
                node: n.id,
                metrics: metric_line(specs, n),
                strategy_summary: if titles.is_empty() { "baseline".into() } else { titles.join("; ") },
                strengths: insight.to_string(),
                weaknesses: format!("{failed} of {} children failed", graph.children(n.id).len()),
            }
        })
        .collect()
}

/// Drives a run over one journal.
pub struct Evolution {
    config: EngineConfig,
    operators: Operators,
    sandbox: Arc<dyn Sandbox>,
}

impl std::fmt::Debug for Evolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Evolution").field("config", &self.config).field("operators", &self.operators).finish()
    }
}

impl Evolution {
    pub fn new(config: EngineConfig, operators: Operators, sandbox: Arc<dyn Sandbox>) -> Result<Self, EngineError> {
        config.check().map_err(EngineError::Config)?;
        Ok(Self { config, operators, sandbox })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Starts a fresh run on an empty journal.
    pub fn run(&self, journal: &mut Journal, trigger: Option<TriggerEvent>) -> Result<RunOutcome, EngineError> {
        if !journal.events().is_empty() {
            return Err(EngineError::AlreadyStarted);
        }
        journal.append(EventBody::RunStarted(RunStarted {
            run_id: self.config.run_id.clone(),
            config_hash: self.config.config_hash(),
            metric_specs: self.config.metric_specs.clone(),
            trigger: trigger.clone(),
        }))?;
        if let Some(t) = &trigger {
            journal.append(EventBody::TriggerFired { trigger: t.clone() })?;
        }
        let graph = EvolutionGraph::new(self.config.run_id.clone());
        self.cycle(journal, graph, trigger)
    }

    /// Continues the run recorded in `journal`. An empty journal starts a
    /// fresh run; a finished one returns its stored outcome untouched. A
    /// node left in progress by a crash is marked abandoned and rebuilt
    /// under the same id.
    pub fn resume(&self, journal: &mut Journal, allow_config_mismatch: bool) -> Result<RunOutcome, EngineError> {
        if journal.events().is_empty() {
            return self.run(journal, None);
        }
        let state = JournalState::replay(journal.events())?;
        if let Some(done) = state.finished {
            return Ok(done);
        }
        let found = self.config.config_hash();
        if state.started.config_hash != found && !allow_config_mismatch {
            return Err(EngineError::ConfigMismatch { expected: state.started.config_hash, found });
        }
        if let Some(p) = &state.pending {
            journal.append(EventBody::NodeAbandoned { node: p.id })?;
        }
        let trigger = state.started.trigger.clone();
        if let Some(t) = &trigger {
            if !state.trigger_fired {
                journal.append(EventBody::TriggerFired { trigger: t.clone() })?;
            }
        }
        self.operators.backend().seed_usage(state.total_usage());
        self.cycle(journal, state.graph, trigger)
    }

    fn check_plan(&self, graph: &EvolutionGraph, id: NodeId, e: &Expansion) -> Result<(), EngineError> {
        let bad = |reason: String| EngineError::InvalidPlan { node: id, reason };
        let cfg = &self.config.strategy;
        let parent_ok = |p: NodeId, want: NodeStatus| -> Result<(), EngineError> {
            let n = graph.get(p).ok_or_else(|| bad(format!("unknown parent {p}")))?;
            if n.status != want {
                return Err(bad(format!("parent {p} is {:?}, expected {:?}", n.status, want)));
            }
            if strategy::is_excluded(graph, cfg, p)? {
                return Err(bad(format!("parent {p} lies on a terminated branch")));
            }
            Ok(())
        };
        match e {
            Expansion::Draft => Ok(()),
            Expansion::Improve(p) if p.is_root() => Err(bad("improve from the root; use a draft".into())),
            Expansion::Improve(p) => parent_ok(*p, NodeStatus::Valid),
            Expansion::Debug(p) => parent_ok(*p, NodeStatus::Buggy),
            Expansion::Merge(ps) => {
                if ps.len() < 2 {
                    return Err(bad("merge needs at least two parents".into()));
                }
                let mut seen = ps.clone();
                seen.sort();
                seen.dedup();
                if seen.len() != ps.len() {
                    return Err(bad("duplicate merge parent".into()));
                }
                ps.iter().try_for_each(|p| parent_ok(*p, NodeStatus::Valid))
            }
        }
    }

    fn next_expansion(&self, graph: &EvolutionGraph) -> Result<Result<Expansion, StopReason>, EngineError> {
        let id = graph.next_id();
        match &self.config.policy {
            ExpansionPolicy::TopK => {
                match strategy::plan_expansion(graph, &self.config.strategy, &self.config.metric_specs) {
                    Ok(e) => Ok(Ok(e)),
                    Err(StrategyError::NoExpandableNode) => Ok(Err(StopReason::NoExpandableNode)),
                    Err(e) => Err(e.into()),
                }
            }
            ExpansionPolicy::Scripted(plan) => match plan.get(&id) {
                None => Ok(Err(StopReason::PlanExhausted)),
                Some(e) => {
                    self.check_plan(graph, id, e)?;
                    Ok(Ok(e.clone()))
                }
            },
        }
    }

    fn context(
        &self,
        graph: &EvolutionGraph,
        id: NodeId,
        e: &Expansion,
        trigger: Option<&TriggerEvent>,
    ) -> OperatorContext {
        let task = &self.config.task;
        let specs = &self.config.metric_specs;
        let root = graph.root().unwrap_or(NodeId::ROOT);
        let parent_id = e.primary_parent(root);
        let parent = graph.get(parent_id);
        let action = match e {
            Expansion::Draft => "draft",
            Expansion::Improve(_) => "improve",
            Expansion::Debug(_) => "debug",
            Expansion::Merge(_) => "merge",
        };
        let with_code = parent.filter(|p| !p.code.is_empty());
        OperatorContext {
            task_description: task.description.clone(),
            data_description: task.data_description.clone(),
            task_requirements: task.requirements.clone(),
            primary_metric: specs.primary().name.clone(),
            node: Some(id),
            expansion_note: format!("node {id} (parent {parent_id}, action {action})"),
            trigger_note: trigger.map(ToString::to_string),
            parent_code: with_code.map(|p| p.code.clone()),
            parent_exec_summary: with_code.and_then(|p| p.exec.as_ref()).map(|x| x.summary(20)),
            parent_strategies: with_code.map(|p| p.suggestions.clone()).filter(|s| !s.is_empty()),
            journal_summaries: journal_summaries(graph, specs, parent_id, self.config.summary_limit),
            output_format: crate::operators::prompt::IDEA_OUTPUT_FORMAT.to_string(),
        }
    }

    fn cycle(
        &self,
        journal: &mut Journal,
        mut graph: EvolutionGraph,
        trigger: Option<TriggerEvent>,
    ) -> Result<RunOutcome, EngineError> {
        let started = Instant::now();
        if graph.is_empty() {
            let root = Node::root(self.config.baseline.as_ref(), journal.clock().now());
            journal.append(EventBody::NodeCreated {
                id: root.id,
                primary_parent: None,
                merge_parents: Vec::new(),
                action: root.action,
            })?;
            journal.append(EventBody::NodeFinalized { node: Box::new(root.clone()) })?;
            graph.add_node(root)?;
        }
        let deps = WorkflowDeps {
            operators: &self.operators,
            sandbox: self.sandbox.as_ref(),
            specs: &self.config.metric_specs,
            max_debug_depth: self.config.budget.max_debug_depth,
        };
        let stop = loop {
            if graph.len() > self.config.budget.max_nodes {
                break StopReason::MaxNodes;
            }
            if let Some(limit) = self.config.budget.wall_clock_limit_secs {
                if started.elapsed().as_secs_f64() >= limit {
                    break StopReason::WallClock;
                }
            }
            let expansion = match self.next_expansion(&graph)? {
                Ok(e) => e,
                Err(reason) => break reason,
            };
            let id = graph.next_id();
            let ctx = self.context(&graph, id, &expansion, trigger.as_ref());
            let result = run_node_workflow(&graph, id, &expansion, &ctx, &deps, journal)?;
            graph.add_node(result.node)?;
            if strategy::should_terminate_branch(&graph, &self.config.strategy, id)? {
                journal.append(EventBody::BranchTerminated { node: id })?;
            }
            if result.fatal.is_some() {
                break StopReason::TokenBudget;
            }
        };
        let specs = &self.config.metric_specs;
        let (best, best_metrics, primary_edge) = match strategy::best_node(&graph, specs) {
            Ok(b) => (Some(b), graph.node(b)?.metrics.clone(), graph.lineage(b)?),
            Err(StrategyError::NoValidNode) => (None, Default::default(), Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let outcome = RunOutcome { best, best_metrics, primary_edge, stop_reason: stop, node_count: graph.len() - 1 };
        journal.append(EventBody::RunFinished(outcome.clone()))?;
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Action, MetricMap};
    use chrono::Utc;

    fn task() -> TaskSpec {
        TaskSpec {
            description: "detect defects".into(),
            data_description: String::new(),
            requirements: "print mAP50".into(),
        }
    }

    #[test]
    fn hash_ignores_budget() {
        let a = EngineConfig::new("r", task());
        let mut b = a.clone();
        b.budget.max_nodes = 99;
        assert_eq!(a.config_hash(), b.config_hash());
        b.strategy.k = 5;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn budget_checks() {
        assert!(RunBudget { max_nodes: 0, ..Default::default() }.check().is_err());
        assert!(RunBudget { max_debug_depth: 0, ..Default::default() }.check().is_err());
        assert!(RunBudget::default().check().is_ok());
    }

    #[test]
    fn metric_line_format() {
        let mut n = Node::draft(NodeId(10), Some(NodeId(6)), Action::Improve, Utc::now());
        n.metrics = MetricMap::from([("mAP50".into(), 0.4954), ("mAP50-95".into(), 0.3069)]);
        assert_eq!(metric_line(&MetricSpecs::default(), &n), "mAP50-95=0.3069, mAP50=0.4954");
        n.metrics.clear();
        assert_eq!(metric_line(&MetricSpecs::default(), &n), "mAP50-95=---, mAP50=---");
    }

    #[test]
    fn scripted_policy_serializes() {
        let p = ExpansionPolicy::Scripted(BTreeMap::from([
            (NodeId(1), Expansion::Draft),
            (NodeId(2), Expansion::Improve(NodeId(1))),
        ]));
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<ExpansionPolicy>(&s).unwrap(), p);
    }
}
