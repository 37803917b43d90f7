//! One expansion step: ideas, code, then the validate / analyze / execute /
//! refine loop until the node is valid or the debug budget is spent.

use crate::journal::{EventBody, Journal, JournalError, OperatorCall};
use crate::model::{Action, EvolutionGraph, MetricSpecs, Node, NodeId, NodeStatus, TokenUsage};
use crate::operators::{
    BackendError, CallRecord, CreatorMode, OperatorContext, OperatorError, Operators, PriorAttempt,
};
use crate::sandbox::{ExecOutcome, Sandbox, SandboxError};
use crate::strategy::Expansion;

use super::metric_line;

/// Collaborators of a node workflow.
pub struct WorkflowDeps<'a> {
    pub operators: &'a Operators,
    pub sandbox: &'a dyn Sandbox,
    pub specs: &'a MetricSpecs,
    pub max_debug_depth: u32,
}

/// A finalized node, plus the fatal backend error that cut it short, if any.
#[derive(Debug)]
pub struct NodeResult {
    pub node: Node,
    pub fatal: Option<BackendError>,
}

enum Stop {
    Journal(JournalError),
    Operator(OperatorError),
    Sandbox(SandboxError),
}

impl From<JournalError> for Stop {
    fn from(e: JournalError) -> Self {
        Stop::Journal(e)
    }
}

fn action_of(expansion: &Expansion) -> Action {
    match expansion {
        Expansion::Draft => Action::Draft,
        Expansion::Improve(_) => Action::Improve,
        Expansion::Debug(_) => Action::Debug,
        Expansion::Merge(_) => Action::Merge,
    }
}

struct Recorder<'j> {
    journal: &'j mut Journal,
    node: NodeId,
    tokens: TokenUsage,
}

impl Recorder<'_> {
    /// Runs one operator and journals every completion it made, whether or
    /// not the operator itself succeeded.
    fn op<T>(&mut self, f: impl FnOnce(&mut Vec<CallRecord>) -> Result<T, OperatorError>) -> Result<T, Stop> {
        let mut calls = Vec::new();
        let result = f(&mut calls);
        for c in calls {
            self.tokens += c.usage;
            for w in &c.warnings {
                self.journal.append(EventBody::Warning { node: Some(self.node), message: w.clone() })?;
            }
            self.journal.append(EventBody::OperatorCall(OperatorCall {
                node: self.node,
                operator: c.operator,
                model: c.model,
                fingerprint: c.fingerprint,
                usage: c.usage,
            }))?;
        }
        result.map_err(Stop::Operator)
    }

    fn sandbox_run(&mut self, attempt: u32, exec: &ExecOutcome) -> Result<(), Stop> {
        self.journal.append(EventBody::SandboxRun {
            node: self.node,
            attempt,
            mode: exec.mode,
            exit: exec.exit.clone(),
            wall_seconds: exec.wall_seconds,
            metrics: exec.metrics.clone(),
        })?;
        for w in &exec.warnings {
            self.journal.append(EventBody::Warning { node: Some(self.node), message: w.clone() })?;
        }
        Ok(())
    }
}

/// Builds node `id` by `expansion` and journals every stage, from
/// `node_created` through `node_finalized`.
///
/// Operator and sandbox failures finalize the node as buggy with the cause
/// in its analysis; only journal failures are returned as errors.
pub fn run_node_workflow(
    graph: &EvolutionGraph,
    id: NodeId,
    expansion: &Expansion,
    ctx: &OperatorContext,
    deps: &WorkflowDeps<'_>,
    journal: &mut Journal,
) -> Result<NodeResult, JournalError> {
    let root = graph.root().unwrap_or(NodeId::ROOT);
    let primary = expansion.primary_parent(root);
    let merge_parents = match expansion {
        Expansion::Merge(ps) => ps.clone(),
        _ => Vec::new(),
    };
    let action = action_of(expansion);
    journal.append(EventBody::NodeCreated {
        id,
        primary_parent: Some(primary),
        merge_parents: merge_parents.clone(),
        action,
    })?;
    if !merge_parents.is_empty() {
        journal.append(EventBody::MergePerformed { node: id, parents: merge_parents.clone() })?;
    }
    let mut node = Node::draft(id, Some(primary), action, journal.clock().now());
    node.merge_parents = merge_parents;

    let mut rec = Recorder { journal, node: id, tokens: TokenUsage::ZERO };
    let mut fatal = None;
    match stages(graph, expansion, ctx, deps, &mut rec, &mut node) {
        Ok(()) => {}
        Err(Stop::Journal(e)) => return Err(e),
        Err(Stop::Operator(e)) => {
            if let OperatorError::Backend(b) = &e {
                if b.is_fatal() {
                    fatal = Some(b.clone());
                }
            }
            fail(&mut node, &e.to_string());
        }
        Err(Stop::Sandbox(e)) => fail(&mut node, &e.to_string()),
    }
    node.tokens = rec.tokens;
    rec.journal.append(EventBody::NodeFinalized { node: Box::new(node.clone()) })?;
    Ok(NodeResult { node, fatal })
}

fn fail(node: &mut Node, cause: &str) {
    node.status = NodeStatus::Buggy;
    node.metrics.clear();
    if !node.analysis.is_empty() {
        node.analysis.push('\n');
    }
    node.analysis.push_str(&format!("node failed: {cause}"));
}

fn stages(
    graph: &EvolutionGraph,
    expansion: &Expansion,
    ctx: &OperatorContext,
    deps: &WorkflowDeps<'_>,
    rec: &mut Recorder<'_>,
    node: &mut Node,
) -> Result<(), Stop> {
    let ops = deps.operators;
    let id = node.id;
    let candidates: Vec<&Node> = match expansion {
        Expansion::Merge(ps) => ps
            .iter()
            .map(|p| graph.node(*p))
            .collect::<Result<_, _>>()
            .map_err(|e| Stop::Operator(OperatorError::Precondition(e.to_string())))?,
        _ => Vec::new(),
    };
    let (suggestions, mode) = match expansion {
        Expansion::Merge(_) => {
            let m = rec.op(|c| ops.merge_analysis(ctx, &candidates, |n| metric_line(deps.specs, n), c))?;
            (m.merged_suggestions, CreatorMode::Merge)
        }
        _ => {
            let s = rec.op(|c| ops.idea_generator(ctx, c))?;
            let mode = if ctx.parent_code.is_some() { CreatorMode::Improvement } else { CreatorMode::Initial };
            (s, mode)
        }
    };
    node.suggestions = suggestions.render();
    node.code = rec.op(|c| ops.code_creator(ctx, &suggestions, mode, &candidates, c))?;

    let mut prior: Vec<PriorAttempt> = Vec::new();
    loop {
        let attempt = node.debug_attempts;
        let validation = deps.sandbox.validate(id, &node.code).map_err(Stop::Sandbox)?;
        if let Some(e) = &validation.exec {
            rec.sandbox_run(attempt, e)?;
        }
        let code = node.code.clone();
        let mut verdict =
            rec.op(|c| ops.analyzer(ctx, &code, Some(&validation.syntax), validation.exec.as_ref(), attempt, c))?;
        let mut last_exec = validation.exec;
        if !verdict.buggy {
            let full = deps.sandbox.execute(id, &node.code).map_err(Stop::Sandbox)?;
            rec.sandbox_run(attempt, &full)?;
            verdict = rec.op(|c| ops.analyzer(ctx, &code, None, Some(&full), attempt, c))?;
            last_exec = Some(full);
        }
        node.exec = last_exec;
        node.analysis = verdict.analysis.clone();
        if !verdict.buggy {
            node.status = NodeStatus::Valid;
            node.metrics = verdict.extracted_metrics;
            return Ok(());
        }
        if attempt >= deps.max_debug_depth {
            node.status = NodeStatus::Buggy;
            return Ok(());
        }
        node.debug_attempts += 1;
        let n = node.debug_attempts;
        let fixed = rec.op(|c| ops.code_refiner(ctx, &code, node.exec.as_ref(), &verdict.analysis, &prior, n, c))?;
        prior.push(PriorAttempt { code, analysis: verdict.analysis });
        node.code = fixed;
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;
    use std::sync::Arc;

    use super::*;
    use crate::clock::FixedClock;
    use crate::fixtures::synthetic::{
        synthetic_backend, synthetic_backend_with, synthetic_metrics, synthetic_sandbox, Fault, FaultPlan,
    };
    use crate::operators::{CompletionBackend, ModelRouting, OperatorKind, SamplingParams, ScriptedBackend};

    const SEED: u64 = 7;

    fn run(backend: Arc<dyn CompletionBackend>, depth: u32) -> (NodeResult, Journal) {
        let mut graph = EvolutionGraph::new("t");
        graph.add_node(Node::root(None, chrono::Utc::now())).unwrap();
        let ops = Operators::new(backend, ModelRouting::default(), SamplingParams::default());
        let sandbox = synthetic_sandbox();
        let specs = MetricSpecs::default();
        let deps = WorkflowDeps { operators: &ops, sandbox: &sandbox, specs: &specs, max_debug_depth: depth };
        let mut ctx = OperatorContext::new("detect defects", "print mAP50");
        ctx.node = Some(NodeId(1));
        let mut journal = Journal::in_memory(Arc::new(FixedClock::default()));
        let r = run_node_workflow(&graph, NodeId(1), &Expansion::Draft, &ctx, &deps, &mut journal).unwrap();
        (r, journal)
    }

    fn calls(j: &Journal, op: OperatorKind) -> usize {
        j.events().iter().filter(|e| matches!(&e.body, EventBody::OperatorCall(c) if c.operator == op)).count()
    }

    fn expected_metrics(attempt: u32) -> (f64, f64) {
        synthetic_metrics(SEED, NodeId(1), attempt)
    }

    #[test]
    fn healthy_node_needs_no_refiner() {
        let (r, j) = run(Arc::new(synthetic_backend(SEED, FaultPlan::none())), 3);
        assert_eq!(r.node.status, NodeStatus::Valid);
        assert_eq!(r.node.debug_attempts, 0);
        assert_eq!(calls(&j, OperatorKind::CodeRefiner), 0);
        assert_eq!(calls(&j, OperatorKind::Analyzer), 2);
        assert_eq!(r.node.metrics.get("mAP50").copied(), Some(expected_metrics(0).1));
        assert_eq!(j.events().first().unwrap().body.kind(), "node_created");
        assert_eq!(j.events().last().unwrap().body.kind(), "node_finalized");
    }

    #[test]
    fn one_failure_then_valid() {
        let faults = FaultPlan::at([(1, 0, Fault::DebugCrash)]);
        let (r, j) = run(Arc::new(synthetic_backend(SEED, faults)), 3);
        assert_eq!(r.node.status, NodeStatus::Valid);
        assert_eq!(r.node.debug_attempts, 1);
        assert_eq!(calls(&j, OperatorKind::CodeRefiner), 1);
        assert_eq!(r.node.metrics.get("mAP50").copied(), Some(expected_metrics(1).1));
    }

    #[test]
    fn all_fail_spends_exactly_the_debug_budget() {
        for depth in 1..=3 {
            for fault in Fault::ALL {
                let (r, j) = run(Arc::new(synthetic_backend(SEED, FaultPlan::always([1], fault))), depth);
                assert_eq!(r.node.status, NodeStatus::Buggy, "{fault:?}");
                assert_eq!(r.node.debug_attempts, depth, "{fault:?}");
                assert_eq!(calls(&j, OperatorKind::CodeRefiner), depth as usize, "{fault:?}");
                assert!(r.node.metrics.is_empty());
                assert!(r.fatal.is_none());
            }
        }
    }

    #[test]
    fn unparsable_ideas_fail_the_node_after_one_retry() {
        let garbled = HashSet::from([OperatorKind::IdeaGenerator]);
        let (r, j) = run(Arc::new(synthetic_backend_with(SEED, FaultPlan::none(), garbled)), 3);
        assert_eq!(r.node.status, NodeStatus::Buggy);
        assert!(r.node.analysis.contains("node failed"), "{}", r.node.analysis);
        assert_eq!(calls(&j, OperatorKind::IdeaGenerator), 2);
        assert_eq!(calls(&j, OperatorKind::CodeCreator), 0);
    }

    #[test]
    fn exhausted_budget_is_fatal() {
        let backend = ScriptedBackend::new(|_| Err(BackendError::BudgetExhausted));
        let (r, j) = run(Arc::new(backend), 3);
        assert_eq!(r.node.status, NodeStatus::Buggy);
        assert_eq!(r.fatal, Some(BackendError::BudgetExhausted));
        assert_eq!(j.events().last().unwrap().body.kind(), "node_finalized");
    }

    #[test]
    fn node_tokens_sum_its_calls() {
        let (r, j) = run(Arc::new(synthetic_backend(SEED, FaultPlan::at([(1, 0, Fault::Silent)]))), 3);
        let sum: TokenUsage = j
            .events()
            .iter()
            .filter_map(|e| match &e.body {
                EventBody::OperatorCall(c) => Some(c.usage),
                _ => None,
            })
            .sum();
        assert_eq!(r.node.tokens, sum);
    }
}
