mod common;

use std::collections::BTreeSet;
use std::path::Path;

use chrono::{Duration, TimeZone, Utc};
use proptest::prelude::*;

use sepdd::config::RunConfig;
use sepdd::engine::{evaluate_triggers, IndicatorState, Observed, TriggerKind};
use sepdd::fixtures::synthetic::FaultPlan;
use sepdd::gateway::format_tokens;
use sepdd::journal::{replay_journal, JournalEvent};
use sepdd::model::{Action, EvolutionGraph, MetricMap, MetricSpecs, Node, NodeId, NodeStatus};
use sepdd::sandbox::extract_metrics;
use sepdd::strategy::{rank_nodes, StrategyConfig};

use common::run_synthetic;

fn graph_from(values: &[(u8, Option<(u8, u8)>)]) -> EvolutionGraph {
    let mut g = EvolutionGraph::new("p");
    g.add_node(Node::root(None, Utc::now())).unwrap();
    for (i, (p, m)) in values.iter().enumerate() {
        let id = i as u32 + 1;
        let parent = NodeId(*p as u32 % id);
        let mut n = Node::draft(NodeId(id), Some(parent), Action::Improve, Utc::now());
        match m {
            Some((a, b)) => {
                n.status = NodeStatus::Valid;
                n.metrics =
                    MetricMap::from([("mAP50".into(), *a as f64 / 100.0), ("mAP50-95".into(), *b as f64 / 100.0)]);
            }
            None => n.status = NodeStatus::Buggy,
        }
        g.add_node(n).unwrap();
    }
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn engine_graphs_are_well_formed(seed in 0u64..10_000, rate in 0.0f64..0.6, nodes in 1usize..14, depth in 1u32..4) {
        let (j, out) = run_synthetic(seed, FaultPlan::random(seed, rate), nodes, depth);
        let g = replay_journal(j.events()).unwrap();
        prop_assert_eq!(g.len(), out.node_count + 1);
        prop_assert!(out.node_count <= nodes);
        for n in g.nodes() {
            let lineage = g.lineage(n.id).unwrap();
            prop_assert_eq!(lineage[0], NodeId(0));
            prop_assert!(lineage.len() <= g.len());
            prop_assert_eq!(*lineage.last().unwrap(), n.id);
            prop_assert!(n.debug_attempts <= depth);
            prop_assert_eq!(g.children(n.id).len(), g.child_count(n.id).unwrap());
            if n.status == NodeStatus::Valid && !n.id.is_root() {
                prop_assert!(n.metrics.contains_key("mAP50"));
            }
            if n.status == NodeStatus::Buggy {
                prop_assert!(n.metrics.is_empty());
            }
        }
        let ids: Vec<u32> = g.nodes().map(|n| n.id.0).collect();
        prop_assert_eq!(ids, (0..g.len() as u32).collect::<Vec<_>>());
    }

    #[test]
    fn journal_events_survive_serialization(seed in 0u64..10_000, rate in 0.0f64..0.5) {
        let (j, _) = run_synthetic(seed, FaultPlan::random(seed, rate), 5, 2);
        for e in j.events() {
            let line = serde_json::to_string(e).unwrap();
            prop_assert!(!line.contains('\n'));
            let back: JournalEvent = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(&back, e);
        }
    }

    #[test]
    fn ranking_is_a_total_order(values in prop::collection::vec((any::<u8>(), prop::option::of((0u8..100, 0u8..100))), 1..25)) {
        let g = graph_from(&values);
        let specs = MetricSpecs::default();
        let Ok(ranked) = rank_nodes(&g, &specs) else {
            prop_assert!(g.nodes().all(|n| n.status != NodeStatus::Valid || n.metrics.is_empty()));
            return Ok(());
        };
        let valid = g.nodes().filter(|n| n.status == NodeStatus::Valid && !n.metrics.is_empty()).count();
        prop_assert_eq!(ranked.len(), valid);
        for w in ranked.windows(2) {
            let (a, b) = (g.node(w[0]).unwrap(), g.node(w[1]).unwrap());
            let key = |n: &Node| (n.metrics["mAP50"], n.metrics["mAP50-95"]);
            prop_assert!(key(a) > key(b) || (key(a) == key(b) && a.id < b.id));
        }
    }

    #[test]
    fn config_round_trip(k in 1usize..8, period in 1usize..9, max_nodes in 1usize..50, depth in 1u32..6, temp in 0.0f64..2.0, seed in any::<u64>()) {
        let base = "run_dir = \"r\"\nfixture = \"synthetic\"\n[task]\ndescription = \"d\"\nrequirements = \"q\"\n";
        let sets = vec![
            format!("strategy.k={k}"),
            format!("strategy.merge_period={period}"),
            format!("budget.max_nodes={max_nodes}"),
            format!("budget.max_debug_depth={depth}"),
            format!("sampling.temperature={temp:?}"),
            format!("seed={}", seed >> 1),
        ];
        let c = RunConfig::from_toml(base, Path::new("/x"), &sets).unwrap();
        prop_assert_eq!(c.strategy.k, k);
        prop_assert_eq!(c.sampling.temperature, temp);
        let text = c.to_toml();
        let again = RunConfig::from_toml(&text, Path::new("/y"), &[]).unwrap();
        prop_assert_eq!(&again, &c);
        prop_assert_eq!(again.to_toml(), text);
    }

    #[test]
    fn triggers_follow_priority(
        floor in 0.0f64..1.0,
        metric in prop::option::of(0.0f64..1.0),
        known in prop::collection::btree_set("[a-e]", 0..4),
        seen in prop::option::of(prop::collection::btree_set("[a-g]", 0..5)),
        note in prop::option::of("[a-z ]{0,8}"),
        flag in any::<bool>(),
        age in 0i64..200,
        period in 1i64..150,
    ) {
        let t0 = Utc.with_ymd_and_hms(2025, 6, 1, 0, 0, 0).unwrap();
        let state = IndicatorState {
            last_refresh_metric: None,
            metric_floor: floor,
            known_labels: known.clone(),
            last_evolution_at: t0,
            period_secs: period,
            ops_change_flag: flag,
            metric_range: (0.0, 1.0),
        };
        let observed = Observed { metric, labels: seen.clone(), ops_note: note.clone() };
        let got = evaluate_triggers(&state, t0 + Duration::seconds(age), &observed).map(|t| t.kind());
        let added = seen.as_ref().is_some_and(|s| !s.difference(&known).collect::<BTreeSet<_>>().is_empty());
        let want = if metric.is_some_and(|m| m < floor) {
            Some(TriggerKind::RetrainingFailure)
        } else if added {
            Some(TriggerKind::LabelEvolution)
        } else if note.as_ref().is_some_and(|n| !n.trim().is_empty()) || flag {
            Some(TriggerKind::OperationalChange)
        } else if age >= period {
            Some(TriggerKind::Periodic)
        } else {
            None
        };
        prop_assert_eq!(got, want);
    }

    #[test]
    fn printed_floats_parse_back_exactly(v in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, name in "[A-Za-z0-9_.-]{1,12}") {
        let m = extract_metrics(&format!("noise\nSEPDD_METRIC {name}={v}\n"), &[]);
        prop_assert_eq!(m.metrics.get(&name).copied(), Some(v));
        prop_assert!(m.warnings.is_empty());
    }

    #[test]
    fn parser_never_panics(s in "\\PC*") {
        let _ = extract_metrics(&s, &[]);
    }

    #[test]
    fn token_format_units(n in 0u64..10_000_000_000) {
        let s = format_tokens(n);
        match n {
            0..=999 => prop_assert_eq!(s, n.to_string()),
            1_000..=999_999 => prop_assert!(s.ends_with('K')),
            _ => prop_assert!(s.ends_with('M')),
        }
    }

    #[test]
    fn strategy_defaults_survive_partial_toml(k in 1usize..9) {
        let c: StrategyConfig = toml::from_str(&format!("k = {k}")).unwrap();
        prop_assert_eq!(c.k, k);
        prop_assert_eq!(c.merge_period, StrategyConfig::default().merge_period);
    }
}
