//! Evaluates the evolution triggers against a few monitoring snapshots and
//! shows which one wins when several fire together.
//!
//! ```bash
//! cargo run --example triggers
//! ```

use chrono::{Duration, TimeZone, Utc};

use sepdd::engine::{evaluate_triggers, IndicatorState, Observed};

fn main() -> anyhow::Result<()> {
    let t0 = Utc.with_ymd_and_hms(2025, 3, 1, 0, 0, 0).single().expect("valid date");
    let state = IndicatorState {
        last_refresh_metric: Some(0.47),
        metric_floor: 0.40,
        known_labels: ["scratch", "dent"].into_iter().map(String::from).collect(),
        last_evolution_at: t0,
        period_secs: 30 * 86_400,
        ops_change_flag: false,
        metric_range: (0.0, 1.0),
    };
    state.check()?;

    let labels = |ls: &[&str]| Some(ls.iter().map(|s| s.to_string()).collect());
    let cases = [
        ("quiet day", Duration::days(3), Observed { metric: Some(0.46), ..Default::default() }),
        ("retrain regressed", Duration::days(3), Observed { metric: Some(0.31), ..Default::default() }),
        (
            "new defect type",
            Duration::days(3),
            Observed { labels: labels(&["scratch", "dent", "burr"]), ..Default::default() },
        ),
        ("label retired", Duration::days(3), Observed { labels: labels(&["scratch"]), ..Default::default() }),
        (
            "camera swapped",
            Duration::days(3),
            Observed { ops_note: Some("line 2 camera replaced".into()), ..Default::default() },
        ),
        ("a month passed", Duration::days(31), Observed::default()),
        (
            "everything at once",
            Duration::days(40),
            Observed { metric: Some(0.2), labels: labels(&["burr"]), ops_note: Some("new lighting".into()) },
        ),
    ];
    for (name, age, observed) in cases {
        match evaluate_triggers(&state, t0 + age, &observed) {
            Some(t) => println!("{name:<20} -> {t}"),
            None => println!("{name:<20} -> no trigger"),
        }
    }
    Ok(())
}
