mod common;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use sepdd::engine::{EngineError, ExpansionPolicy};
use sepdd::fixtures::synthetic::{synthetic_backend, synthetic_sandbox, Fault, FaultPlan};
use sepdd::journal::{replay_journal, write_events, EventBody, Journal};
use sepdd::model::{Action, Baseline, MetricMap, NodeId, NodeStatus};
use sepdd::operators::{BackendError, ScriptedBackend};
use sepdd::{Evolution, Expansion, StopReason, TriggerEvent};

use common::{clock, operators, run_synthetic, synthetic_config, synthetic_engine};

fn kinds(j: &Journal) -> Vec<&'static str> {
    j.events().iter().map(|e| e.body.kind()).collect()
}

#[test]
fn healthy_run_fills_the_node_budget_and_merges() {
    let (j, out) = run_synthetic(1, FaultPlan::none(), 12, 3);
    assert_eq!(out.node_count, 12);
    assert_eq!(out.stop_reason, StopReason::MaxNodes);
    let g = replay_journal(j.events()).unwrap();
    assert!(g.nodes().all(|n| n.status == NodeStatus::Valid));
    let merge = g.nodes().find(|n| n.action == Action::Merge).expect("a merge after five successes");
    assert!(merge.merge_parents.len() >= 2);
    let seq_created = j
        .events()
        .iter()
        .position(|e| matches!(&e.body, EventBody::NodeCreated { id, .. } if *id == merge.id))
        .unwrap();
    assert!(matches!(&j.events()[seq_created + 1].body, EventBody::MergePerformed { node, .. } if *node == merge.id));
    let edge = &out.primary_edge;
    assert_eq!(edge.first(), Some(&NodeId(0)));
    assert_eq!(edge.last().copied(), out.best);
}

#[test]
fn event_order_of_a_run() {
    let (j, _) = run_synthetic(2, FaultPlan::none(), 1, 3);
    assert_eq!(
        kinds(&j),
        [
            "run_started",
            "node_created",
            "node_finalized",
            "node_created",
            "operator_call",
            "operator_call",
            "sandbox_run",
            "operator_call",
            "sandbox_run",
            "operator_call",
            "node_finalized",
            "run_finished"
        ]
    );
}

#[test]
fn trigger_is_journaled() {
    let engine = synthetic_engine(3, FaultPlan::none(), 2, 1);
    let mut j = Journal::in_memory(clock());
    let t = TriggerEvent::OperationalChange { note: "new camera firmware".into() };
    engine.run(&mut j, Some(t.clone())).unwrap();
    assert!(matches!(&j.events()[1].body, EventBody::TriggerFired { trigger } if *trigger == t));
    assert!(matches!(&j.events()[0].body, EventBody::RunStarted(s) if s.trigger == Some(t)));
}

#[test]
fn second_run_on_a_journal_is_refused() {
    let engine = synthetic_engine(4, FaultPlan::none(), 1, 1);
    let mut j = Journal::in_memory(clock());
    engine.run(&mut j, None).unwrap();
    assert!(matches!(engine.run(&mut j, None), Err(EngineError::AlreadyStarted)));
}

#[test]
fn finished_journal_resumes_to_the_same_outcome_without_writing() {
    let (mut j, out) = run_synthetic(5, FaultPlan::random(5, 0.3), 6, 2);
    let n = j.events().len();
    let again = synthetic_engine(5, FaultPlan::random(5, 0.3), 6, 2).resume(&mut j, false).unwrap();
    assert_eq!(again, out);
    assert_eq!(j.events().len(), n);
}

#[test]
fn config_mismatch_is_refused_unless_allowed() {
    let (j, _) = run_synthetic(6, FaultPlan::none(), 6, 2);
    let cut = j
        .events()
        .iter()
        .position(|e| matches!(e.body, EventBody::NodeFinalized { ref node } if node.id == NodeId(3)))
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("j.ndjson");
    write_events(&path, &j.events()[..=cut]).unwrap();

    let mut cfg = synthetic_config(6, 6, 2);
    cfg.strategy.k = 1;
    let other = Evolution::new(
        cfg.clone(),
        operators(Arc::new(synthetic_backend(6, FaultPlan::none()))),
        Arc::new(synthetic_sandbox()),
    )
    .unwrap();
    let mut jj = Journal::open(&path, clock()).unwrap();
    assert!(matches!(other.resume(&mut jj, false), Err(EngineError::ConfigMismatch { .. })));
    assert_eq!(other.resume(&mut jj, true).unwrap().node_count, 6);

    write_events(&path, &j.events()[..=cut]).unwrap();
    let bigger = synthetic_engine(6, FaultPlan::none(), 9, 2);
    let mut jj = Journal::open(&path, clock()).unwrap();
    assert_eq!(bigger.resume(&mut jj, false).unwrap().node_count, 9, "budget changes do not alter the config hash");
}

#[test]
fn interrupted_node_is_abandoned_and_rebuilt_under_its_id() {
    let (j, out) = run_synthetic(7, FaultPlan::none(), 5, 2);
    let cut =
        j.events().iter().position(|e| matches!(e.body, EventBody::NodeCreated { id, .. } if id == NodeId(4))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("j.ndjson");
    write_events(&path, &j.events()[..cut + 3]).unwrap();
    let mut jj = Journal::open(&path, clock()).unwrap();
    let resumed = synthetic_engine(7, FaultPlan::none(), 5, 2).resume(&mut jj, false).unwrap();
    assert_eq!(resumed.best, out.best);
    assert!(jj.events().iter().any(|e| matches!(e.body, EventBody::NodeAbandoned { node } if node == NodeId(4))));
    let g = replay_journal(jj.events()).unwrap();
    assert_eq!(g.len(), 6);
    assert_eq!(g.node(NodeId(4)).unwrap().status, NodeStatus::Valid);
}

#[test]
fn fatal_backend_error_stops_with_token_budget() {
    let calls = std::sync::atomic::AtomicU32::new(0);
    let inner = synthetic_backend(8, FaultPlan::none());
    let backend = ScriptedBackend::new(move |req| {
        if calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst) >= 9 {
            return Err(BackendError::BudgetExhausted);
        }
        sepdd::operators::CompletionBackend::complete(&inner, req)
    });
    let engine =
        Evolution::new(synthetic_config(8, 20, 2), operators(Arc::new(backend)), Arc::new(synthetic_sandbox()))
            .unwrap();
    let mut j = Journal::in_memory(clock());
    let out = engine.run(&mut j, None).unwrap();
    assert_eq!(out.stop_reason, StopReason::TokenBudget);
    let g = replay_journal(j.events()).unwrap();
    let last = g.nodes().last().unwrap();
    assert_eq!(last.status, NodeStatus::Buggy);
    assert!(last.analysis.contains("token budget exhausted"), "{}", last.analysis);
}

#[test]
fn scripted_plan_is_validated_and_can_run_out() {
    let mut plan = BTreeMap::new();
    plan.insert(NodeId(1), Expansion::Draft);
    plan.insert(NodeId(2), Expansion::Improve(NodeId(1)));
    let mut cfg = synthetic_config(9, 10, 1);
    cfg.policy = ExpansionPolicy::Scripted(plan.clone());
    let engine = Evolution::new(
        cfg.clone(),
        operators(Arc::new(synthetic_backend(9, FaultPlan::none()))),
        Arc::new(synthetic_sandbox()),
    )
    .unwrap();
    let out = engine.run(&mut Journal::in_memory(clock()), None).unwrap();
    assert_eq!(out.stop_reason, StopReason::PlanExhausted);
    assert_eq!(out.node_count, 2);

    let faults = FaultPlan::always([1], Fault::DebugCrash);
    let mut bad = cfg;
    bad.policy = ExpansionPolicy::Scripted(plan);
    let engine =
        Evolution::new(bad, operators(Arc::new(synthetic_backend(9, faults))), Arc::new(synthetic_sandbox())).unwrap();
    let e = engine.run(&mut Journal::in_memory(clock()), None).unwrap_err();
    assert!(matches!(e, EngineError::InvalidPlan { node: NodeId(2), .. }), "{e}");
}

#[test]
fn all_buggy_run_has_no_best_node() {
    let (j, out) = run_synthetic(10, FaultPlan::from_fn(|_, _| Some(Fault::Silent)), 5, 1);
    assert_eq!(out.best, None);
    assert!(out.primary_edge.is_empty());
    let report = sepdd::report::build_report(j.events()).unwrap();
    assert_eq!(report.status, sepdd::report::ReportStatus::NoValidNode);
}

#[test]
fn baseline_root_competes_for_best() {
    let mut cfg = synthetic_config(11, 3, 1);
    cfg.baseline = Some(Baseline {
        code: "echo baseline".into(),
        metrics: MetricMap::from([("mAP50".into(), 0.99), ("mAP50-95".into(), 0.7)]),
    });
    let engine = Evolution::new(
        cfg,
        operators(Arc::new(synthetic_backend(11, FaultPlan::none()))),
        Arc::new(synthetic_sandbox()),
    )
    .unwrap();
    let out = engine.run(&mut Journal::in_memory(clock()), None).unwrap();
    assert_eq!(out.best, Some(NodeId(0)));
    assert_eq!(out.primary_edge, [NodeId(0)]);
}

#[test]
fn runs_are_deterministic() {
    let a = run_synthetic(12, FaultPlan::random(12, 0.4), 10, 2).0;
    let b = run_synthetic(12, FaultPlan::random(12, 0.4), 10, 2).0;
    assert_eq!(a.events(), b.events());
    let per_node: HashMap<NodeId, usize> = a.events().iter().fold(HashMap::new(), |mut m, e| {
        if let EventBody::OperatorCall(c) = &e.body {
            *m.entry(c.node).or_default() += 1;
        }
        m
    });
    assert!(per_node.values().all(|&c| c >= 3));
}
